"""Adversarial robustness workbench for a toy contrastive image/text encoder."""

from .attacks import AttackConfig, AttackResult, Scorer, apgd_attack, cw_attack, pgd_attack, preset, run_attack_batch
from .datagen import ImageSample, SyntheticSpec, build_class_contexts, generate_dataset, load_dataset
from .diffcore import Tensor, backward, grad, grad_check
from .evalharness import (
    EvalReport,
    MetricRow,
    breakdown_by,
    eval_answerer,
    eval_classification,
    eval_retrieval_recall1,
    percent_change,
)
from .tasks import (
    answer_to_class,
    build_caption_target,
    build_classification_logits,
    build_retrieval_scorer,
    query_decomposition_classify,
    reference_answerer,
    synth_caption_for_attack,
)
from .vlmodel import (
    EncoderParams,
    ModelConfig,
    contrastive_train,
    encode_image,
    encode_text,
    init_params,
    similarity_logits,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "EncoderParams",
    "EvalReport",
    "ImageSample",
    "MetricRow",
    "ModelConfig",
    "Scorer",
    "SyntheticSpec",
    "Tensor",
    "answer_to_class",
    "apgd_attack",
    "backward",
    "breakdown_by",
    "build_caption_target",
    "build_class_contexts",
    "build_classification_logits",
    "build_retrieval_scorer",
    "contrastive_train",
    "cw_attack",
    "encode_image",
    "encode_text",
    "eval_answerer",
    "eval_classification",
    "eval_retrieval_recall1",
    "generate_dataset",
    "grad",
    "grad_check",
    "init_params",
    "load_dataset",
    "percent_change",
    "pgd_attack",
    "preset",
    "query_decomposition_classify",
    "reference_answerer",
    "run_attack_batch",
    "similarity_logits",
    "synth_caption_for_attack",
]
