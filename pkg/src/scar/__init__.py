"""Progressive residual-VQ codec for anchor features with a learned
autoregressive entropy model."""

from .bitstream import (ProgressiveBitstream, VisibilityMask, decode_layers, decode_scene, diff_mask_decode,
                        diff_mask_encode, encode_positions, decode_positions, encode_scene, importance_masks)
from .coder import QuantizedCdf, RangeDecoder, RangeEncoder, decode_stream, encode_stream, quantize_cdf
from .context import BinarizedGrid, SpatialGrid, binarize_grid, dequantize_grid, grid_embed
from .core import (ARCH_TAGS, AnchorCloud, CodecConfig, DataError, IntegrityError, ParameterError, Rng, ScarError,
                   blend_features, curriculum_beta, generate_synthetic_cloud)
from .entropy import (AdamState, EntropyModel, TrainingError, build_ablation_model, forward_backward,
                      predict_distribution, rate_loss, train_step)
from .harness import RdReport, cmd_ablate, cmd_inspect, cmd_pipeline, train_codec
from .rvq import (CodebookPair, IndexTensor, dequantize, quantize, rotation_trick, rotation_trick_backward,
                  rotation_transform, train_codebooks)

__version__ = "0.1.0"
