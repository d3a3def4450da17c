"""
Uncertainty cost: NP head vs MC dropout
=======================================

MC dropout repeats the whole decoder for every sample.  The NP head decodes
T latent maps too, but the feature part of the first decoder conv is shared
across samples, so its per-sample cost is smaller.  This script counts decoder
passes under sliding evaluation and times both at a few values of T.
"""

from npsemiseg.evalkit import benchmark_uncertainty
from npsemiseg.head import bank_insert
from npsemiseg.model import DropoutSegModel
from npsemiseg.synthdata import generate
from npsemiseg.tensor import Tensor, no_grad
from npsemiseg.trainer import TrainConfig, build_model

cfg = TrainConfig(feature_channels=128, decoder_hidden=64, reduced_dim=16, latent_dim=16,
                  context_dim=16, encoder_depth=1)
np_model = build_model(cfg)
data = generate(seed=0, n_labeled=4, n_unlabeled=0, n_val=2)

# untrained weights are fine for timing, but the banks need some content
with no_grad():
    for s in data.split("labeled"):
        red = np_model.head.reduce(np_model.encode(Tensor(s.image))).data
        bank_insert(np_model.head.context_banks, red, s.mask)
        bank_insert(np_model.head.target_banks, red, s.mask)
np_model.head.refresh_centers()

mc_model = DropoutSegModel(np_model.cfg.encoder, cfg.decoder_hidden, cfg.n_class, cfg.dropout, 0,
                           encoder=np_model.encoder)
images = [s.image for s in data.split("val")]

###############################################################################
# Pass counts: one decoder pass per window for NP, T per window for MC.

r = benchmark_uncertainty(np_model, mc_model, images[:1], T=5, repeats=1, crop=16, stride=8)
print(f"{r.windows} windows: NP {r.passes_np} passes, MC {r.passes_mc} passes")

###############################################################################
# Wall clock, median per image.

for T in (2, 5, 10):
    r = benchmark_uncertainty(np_model, mc_model, images, T, repeats=3)
    print(f"T={T:2d}  NP {r.wall_ms_np:7.1f} ms  MC {r.wall_ms_mc:7.1f} ms  ratio {r.ratio:.2f}")
