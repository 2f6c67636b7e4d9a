"""Non-intrusive binaural speech intelligibility prediction from VQ-CPC features."""

from .audio import AudioBuffer, FrameSequence, MelFeatures, frame_signal, mel_features, read_wav, write_wav
from .config import PipelineConfig, load_config
from .errors import BinauralSIError, ConfigError, DataError, NumericalError, ShapeError, UndefinedCorrelationError
from .evaluation import EvalReport, EvalRow, compute_metrics, mse_db, pearson, spearman
from .predictor import Head, PoolHead, SmallHead, make_head, train_predictor
from .scene import Manifest, NoiseFieldSpec, SceneRecord, augment, build_dataset, gen_isotropic_noise, mix_at_snr
from .stoi import StoiConfig, better_ear_label, stoi_intrusive
from .vqcpc import VQCPC, Codebook, FeatureSequence, VQCPCConfig, quantize, train_vqcpc

__version__ = "0.1.0"
