"""Cross-lingual retrieval-augmented prompting for low-resource-language tasks."""

from .errors import ParcError
from .gateway import (
    BackendDescriptor,
    BackendKind,
    LabelOptionSet,
    ParseStatus,
    Prediction,
    connect,
    embed,
    fill_mask,
    generate,
    map_generation_to_label,
    self_predict_labels,
)
from .metrics import (
    ClassificationReport,
    ConfusionMatrix,
    RougeScores,
    classification_report,
    confusion_matrix,
    f1_table,
    lead_n,
    rouge_scores,
    tokenize,
)
from .prompts import (
    AssembledPrompt,
    PromptTemplate,
    QueryExample,
    Verbalizer,
    apply_verbalizer,
    assemble_prompt,
    invert_verbalizer,
    load_template_registry,
    render_demonstration,
    render_zero_shot,
    shipped_registry,
)
from .runner import (
    ExperimentConfig,
    RunManifest,
    load_config,
    load_dataset,
    read_report,
    run_classification,
    run_summarization,
    sweep,
    write_report,
)
from .vector_store import (
    PoolEntry,
    RetrievalResult,
    SentencePool,
    build_pool,
    cosine_similarity,
    load_pool,
    normalize,
    retrieve_top_k,
    save_pool,
)

__version__ = "0.1.0"

__all__ = [
    "ParcError",
    "apply_verbalizer",
    "assemble_prompt",
    "AssembledPrompt",
    "BackendDescriptor",
    "BackendKind",
    "build_pool",
    "classification_report",
    "ClassificationReport",
    "confusion_matrix",
    "ConfusionMatrix",
    "connect",
    "cosine_similarity",
    "embed",
    "ExperimentConfig",
    "f1_table",
    "fill_mask",
    "generate",
    "invert_verbalizer",
    "LabelOptionSet",
    "lead_n",
    "load_config",
    "load_dataset",
    "load_pool",
    "load_template_registry",
    "map_generation_to_label",
    "normalize",
    "ParseStatus",
    "PoolEntry",
    "Prediction",
    "PromptTemplate",
    "QueryExample",
    "read_report",
    "render_demonstration",
    "render_zero_shot",
    "RetrievalResult",
    "retrieve_top_k",
    "rouge_scores",
    "RougeScores",
    "run_classification",
    "run_summarization",
    "RunManifest",
    "save_pool",
    "self_predict_labels",
    "SentencePool",
    "shipped_registry",
    "sweep",
    "tokenize",
    "Verbalizer",
    "write_report",
]
