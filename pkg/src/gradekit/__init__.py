"""gradekit: AI-assisted exam grading with psychometric confidence filtering.

Pipeline stages: load or simulate an exam and its score tables, orchestrate
page-by-page grading against a pluggable multimodal backend, fit a
two-parameter logistic model to the AI scores, filter judgments by partial
credit, model risk, and problem type, and report regression, multiclass, and
binary quality measures.
"""

from .errors import (
    BackendError,
    FitError,
    GradekitError,
    ScoreTableError,
    SpecValidationError,
    UndefinedMetricError,
    ValidationError,
)
from .exam import (
    ExamSpec,
    NormalizedScoreMatrix,
    ProblemType,
    Provenance,
    ScoreMatrix,
    load_exam_spec,
    load_scores,
    normalize,
    part_type,
)
from .filters import (
    DecisionManifest,
    PartialCreditFilterConfig,
    RiskFilterConfig,
    compose,
    partial_credit_filter,
    risk_filter,
    type_filter,
)
from .irt import FitConfig, IrtModel, expected_scores, fit_2pl, risk_matrix
from .metrics import (
    BinaryReport,
    MulticlassReport,
    RegressionReport,
    binary_report,
    multiclass_report,
    normed_f1,
    ols_regression,
)

__version__ = "0.1.0"
