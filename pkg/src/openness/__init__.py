"""Openness evaluation for vision-language matching models.

Quantifies how a matcher behaves when its label vocabulary grows: closed
accuracy over fixed vocabularies, extensibility under cumulative vocabulary
unions, stability of a fixed target against distractor vocabularies,
adversarial distractor search, feature-geometry diagnostics, and
retrieval-enhanced class embeddings. Everything runs from precomputed
embeddings; no model inference happens here.
"""

__version__ = "0.1.0"

from .errors import OpennessError, DataError  # noqa: F401
from .store import (  # noqa: F401
    CaptionCorpus,
    ClassCatalog,
    ClassEntry,
    EmbeddingMatrix,
    EvaluationDataset,
    LabeledImageSet,
    Violation,
    Vocabulary,
    VocabularyHierarchy,
    dedup_hierarchy,
    dedup_union,
    load_dataset,
    load_embedding_matrix,
    load_labels,
    normalize_rows,
    validate_dataset,
    write_embedding_matrix,
    write_labels,
)
from .matcher import (  # noqa: F401
    MarginRecord,
    Prediction,
    accuracy,
    conditional_accuracy,
    ensemble_class_embedding,
    margins,
    predict,
    similarity_matrix,
)
from .protocol import (  # noqa: F401
    ExpansionCurve,
    ExtensibilityResult,
    GeneralStabilityResult,
    LocalStabilityResult,
    ProtocolReport,
    SamplerConfig,
    acc_closed,
    evaluate_protocol,
    extensibility,
    extensibility_exact,
    general_stability,
    local_stability,
    sample_permutations,
)
from .adversarial import (  # noqa: F401
    AdversarialResult,
    CandidateLexicon,
    build_adversarial_vocabulary,
    exclude_target_names,
    load_lexicon,
    score_candidate_words,
)
from .geometry import (  # noqa: F401
    GeometryReport,
    MarginHistogram,
    alignment_loss,
    class_similarity_grid,
    geometry_report,
    margin_distribution,
    uniformity_loss,
)
from .repe import (  # noqa: F401
    ClassAudit,
    RepeConfig,
    RetrievalHit,
    RetrievalResult,
    build_retrieval_index,
    enhance_class_embedding,
    repe_enhance_catalog,
    retrieve_captions,
)
