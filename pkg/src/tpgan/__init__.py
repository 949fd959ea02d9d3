"""Text-conditioned person image generation with a one-stream multi-resolution GAN."""

from .core import (Checkpoint, CheckpointError, ConfigError, RandomStream, ResolutionProfile,
                   TrainConfig, load_checkpoint, load_config, parse_config, save_checkpoint,
                   validate_config)
from .data import Corpus, CaptionedImage, DataError, generate_sprite_corpus, load_manifest, make_batches
from .conditioning import BagOfTokensEncoder, ConditioningAugmentation, TextCondition, gaussian_kl
from .generator import GeneratorNet, ImagePyramid, export_pyramid
from .discriminator import ScaleDiscriminator, build_discriminators, d_loss, g_loss_adv, gradient_penalty
from .identity_mixup import (IdentityHead, TeacherNet, correlation_ratio, identity_ce_loss, mixup,
                             mixup_probe, teacher_student_loss)
from .metrics import MetricReport, fid, inception_score, vs_score
from .trainer import StepReport, TrainResult, TrainState, evaluate_state, init_state, load_state, train, train_step

__version__ = "0.1.0"
