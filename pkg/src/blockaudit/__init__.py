"""Block-randomized experiments against blackbox ad systems.

Treatments are assigned within blocks of agents. A classifier's accuracy
on held-out blocks (or a keyword count) serves as the test statistic, and
blocked permutation tests turn it into a p-value bound.
"""

from .classifier import LinearModel, accuracy_statistic, explain, predict, select_regularization, train
from .features import FeatureSetKind, build_vocabulary, stem, vectorize
from .harness import analyze, analyze_logs, run_experiment, settings_diff, summarize_family
from .model import AdRecord, AgentLog, ExperimentPlan, Group, load_logs, load_plan, validate_plan
from .randomizer import assign, enumerate_assignments, shuffle_labels
from .stats import (
    Direction,
    HypothesisFamily,
    TestResult,
    bonferroni,
    clopper_pearson_upper,
    exact_permutation_test,
    holm_bonferroni,
    keyword_statistic,
    sampled_permutation_test,
)

__version__ = "0.1.0"
