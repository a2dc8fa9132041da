"""splatvid: video representation and compression with 2D Gaussian splats.

Frames are fitted as fixed-size sets of anisotropic 2D Gaussians by
gradient descent, predicted frames warm-start from their predecessor, and
the result is quantized into a compact delta-coded container that decodes
orders of magnitude faster than it encodes.
"""

from .splats import (CUTOFF_SIGMA, EPS_CHOL, FRAME_I, FRAME_P, INJECTED,
                     Splat, SplatError, SplatFrame, contribution,
                     covariance_from_cholesky, exponent)
from .raster import (FrameGradients, TileIndex, build_tile_index, render,
                     render_backward)
from .train import (FitDivergedError, TrainConfig, TrainReport, fit, l2_loss,
                    schedule_lr)
from .lifecycle import EPS_W, LifecyclePlan, fold_importance, inject, prune
from .keyframes import KeyframeSet, LossProfile, select_keyframes
from .pipeline import (EncodedSequence, EncodeJob, encode_sequence,
                       pretrain_pass, random_init_frame)
from .quantize import (QuantConfig, dequantize_asymmetric, quantize_asymmetric,
                       rvq_decode, rvq_encode, train_codebooks)
from .codec import (QuantizedFrame, encode_frame, quantization_finetune,
                    reconstruct_frame)
from .bitstream import (BadMagicError, BitstreamError, CorruptStreamError,
                        StreamHeader, TruncatedStreamError,
                        UnsupportedVersionError, bits_per_pixel,
                        decode_from_keyframe, decode_sequence, read_bitstream,
                        write_bitstream)
from .media import (ClipSource, load_clip, ms_ssim, psnr, save_image_sequence,
                    save_raw_clip, synth_clip)

__version__ = "0.1.0"
