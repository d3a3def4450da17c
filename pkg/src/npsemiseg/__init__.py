"""Neural-process segmentation head with a desk-scale semi-supervised pipeline.

The pieces, bottom up: :mod:`~npsemiseg.tensor` (a small numpy autodiff),
:mod:`~npsemiseg.ops` and :mod:`~npsemiseg.segmodel` (layers and networks),
:mod:`~npsemiseg.head` (memory banks, attention aggregation, latent and
deterministic paths), :mod:`~npsemiseg.losses`, :mod:`~npsemiseg.trainer`,
:mod:`~npsemiseg.evalkit`, :mod:`~npsemiseg.synthdata` and :mod:`~npsemiseg.cli`.
"""
from .errors import (AggregationError, ConfigError, CoverageError, DataError, FormatError,
                     GenerationError, LossUndefinedError, MetricUndefinedError, NPSemiSegError,
                     NumericError, OracleError, ShapeError)
from .evalkit import (ConfusionMatrix, PavpuConfig, benchmark_uncertainty, miou, pavpu,
                      sliding_eval)
from .gradcheck import finite_difference_check, gradient_report
from .head import (BankSet, CenterSet, CenterSnapshot, ClassMemoryBank, HeadConfig, NPHead,
                   PredictionBundle, attention_aggregate, entropy, export_centers, import_centers)
from .losses import LossBreakdown, cross_entropy, kl_gaussian, total_loss
from .model import DropoutSegModel, ModelConfig, NPSegModel
from .rng import Rng
from .segmodel import Decoder, Encoder, EncoderConfig, SmallConvNet
from .synthdata import Dataset, Sample, augment, generate, load_dataset, save_dataset
from .tensor import Parameter, Tensor, no_grad
from .trainer import (SGD, TrainConfig, fit, load_checkpoint, mc_dropout_predict, pseudo_label,
                      save_checkpoint, train_step)

__version__ = "0.1.0"
