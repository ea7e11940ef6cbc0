"""Vehicle counting over a learned semantic channel.

A CNN encoder turns each frame into a density map, a learned codec carries
the map over an AWGN channel, and a stacked peephole LSTM turns the
received maps into counts. Everything runs on a small numpy autodiff core.
"""

from .channel import ChannelCodec, ChannelConfig, transmit
from .config import RunSettings, parse_config
from .data import AnnotatedFrame, SyntheticConfig, load_dataset, make_gt_density, split, synth_generate
from .decoder import DecoderConfig, SemanticDecoder
from .encoder import EncoderConfig, SemanticEncoder
from .errors import ConfigError, CorruptionError, DatasetError, DivergenceError, DomainError, ShapeError
from .evaluation import MetricsReport, OverheadReport, evaluate, mae, mse, overhead, p_sweep
from .model import FrameSet, ModelBundle, TrainConfig
from .tensor import Tensor, no_grad
from .training import LossReport, checkpoint_load, checkpoint_save, fit

__version__ = "0.1.0"
