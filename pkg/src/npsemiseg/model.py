"""Whole segmentation models: encoder plus NP head, or encoder plus dropout decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .head import HeadConfig, HeadOutput, NPHead, PredictionBundle
from .rng import Rng
from .segmodel import Decoder, DecoderConfig, Encoder, EncoderConfig
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    head: HeadConfig = HeadConfig()

    def as_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "head": asdict(self.head)}


class NPSegModel:
    """Encoder stand-in followed by the NP head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.encoder.feature_channels != cfg.head.feature_channels:
            raise ValueError("encoder feature_channels must match the head's feature_channels")
        self.cfg = cfg
        rng = Rng(seed).child("init")
        self.encoder = Encoder(cfg.encoder, rng.child("encoder"))
        self.head = NPHead(cfg.head, rng.child("head"))
        self.encoder_calls = 0

    @property
    def n_class(self) -> int:
        return self.cfg.head.n_class

    @property
    def decoder(self) -> Decoder:
        return self.head.decoder

    def parameters(self):
        """All parameters in declaration order (the checkpoint order)."""
        return self.encoder.parameters() + self.head.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def encode(self, images: Tensor) -> Tensor:
        self.encoder_calls += 1
        return self.encoder(images)

    def forward(self, image: Tensor, rng: Rng, T: int | None = None,
                allow_cold_start: bool = False) -> HeadOutput:
        return self.head.forward(self.encode(image), rng, T, allow_cold_start=allow_cold_start)

    def predict(self, image, rng: Rng, T: int | None = None,
                allow_cold_start: bool = False) -> PredictionBundle:
        """Inference-mode prediction for one (3, H, W) image."""
        with no_grad():
            out = self.forward(_as_image(image), rng, T, allow_cold_start=allow_cold_start)
        return out.bundle()


class DropoutSegModel:
    """Encoder stand-in followed by a dropout decoder (the MC-dropout baseline)."""

    def __init__(self, encoder_cfg: EncoderConfig, decoder_hidden: int, n_class: int,
                 dropout: float = 0.5, seed: int = 0, encoder: Encoder | None = None):
        rng = Rng(seed).child("init")
        self.encoder = encoder if encoder is not None else Encoder(encoder_cfg, rng.child("encoder"))
        self.decoder = Decoder(
            DecoderConfig(encoder_cfg.feature_channels, decoder_hidden, n_class, dropout),
            rng.child("mc_decoder"), name="mc_decoder")
        self.n_class = n_class
        self.encoder_calls = 0

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def encode(self, images: Tensor) -> Tensor:
        self.encoder_calls += 1
        return self.encoder(images)


def _as_image(image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    return Tensor(np.asarray(image, dtype=np.float32))
