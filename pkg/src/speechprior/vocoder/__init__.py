from .discriminators import (Discriminators, MultiBandMultiScaleDiscriminator,
                             MultiPeriodDiscriminator, mbmsd_forward, mpd_forward,
                             toy_discriminators)
from .generator import SpectralHeadOutput, Vocoder, VocoderConfig, synthesize, toy_vocoder_config
from .losses import (GanLossBreakdown, adversarial_losses, feature_matching_loss,
                     generator_total, reconstruction_loss)
from .train import (TOY_VOCODER_TRAIN, EnhancementModel, VocoderTrainConfig, load_vocoder_checkpoint,
                    train_vocoder)
