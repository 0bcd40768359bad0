"""Plug-and-play latent watermarking for diffusion generators.

A small encoder turns a rendered metadata image into a latent residual that is
added to one channel of the final denoised latent. A paired extractor recovers
the metadata image from the decoded picture, and a template matcher reads it
back as text.
"""

from .errors import (BackendUnavailable, BadChannel, BadIntensity, CapacityExceeded, DataError, EmptyInput,
                     GeometryMismatch, MarkPluggerError, NonFiniteLoss, SampleTooSmall, SchemaError, ShapeMismatch,
                     UnsupportedCharacter)
from .payload import (DEFAULT_LAYOUT, GlyphLayout, MetadataRecord, character_edit_ratio, decode_payload,
                      edit_distance, payload_text, render_payload, render_text)
from .nets import (FusionConfig, WatermarkNets, WatermarkNetSpec, count_parameters, encode_watermark,
                   extract_watermark, fuse_latent, load_checkpoint, save_checkpoint)
from .losses import LossWeights, PerceptualConfig, loss_terms, total_loss
from .attacks import AttackSchedule, AttackSpec, apply_attack, attack_sweep_grid
from .metrics import EvalReport, evaluate_batch, normalized_correlation, psnr, ssim
from .backend import make_backend
from .pipeline import generate_watermarked, verify_image
from .train import TrainConfig, run_training
from .config import load_config

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
