"""Attention-masked conditional GAN for age-group image translation."""

from .conditioning import (AgeGroupLabel, AgeGroupScheme, bin_age,
                           broadcast_condition, concat_input)
from .data import (DatasetRecord, SplitSpec, ingest_directory, split,
                   synth_dataset, to_tensors)
from .evaluation import (age_discrepancy, attention_locality_score,
                         export_triptych, train_age_classifier, verification)
from .losses import (LossBreakdown, LossWeights, adversarial_loss, attention_loss,
                     classification_loss, gradient_penalty, total_loss)
from .models import (Discriminator, Generator, MaskPair, ModelConfig, compose)
from .trainer import (TrainConfig, TrainState, checkpoint_load, checkpoint_save,
                      fit, init_state, sample_target_labels, train_step)

__version__ = "0.1.0"

__all__ = [
    "AgeGroupLabel", "AgeGroupScheme", "bin_age", "broadcast_condition",
    "concat_input", "DatasetRecord", "SplitSpec", "ingest_directory", "split",
    "synth_dataset", "to_tensors", "age_discrepancy", "attention_locality_score",
    "export_triptych", "train_age_classifier", "verification",
    "LossBreakdown", "LossWeights", "adversarial_loss",
    "attention_loss", "classification_loss", "gradient_penalty", "total_loss",
    "Discriminator", "Generator", "MaskPair", "ModelConfig", "compose",
    "TrainConfig", "TrainState", "checkpoint_load", "checkpoint_save", "fit",
    "init_state", "sample_target_labels", "train_step", "__version__",
]
