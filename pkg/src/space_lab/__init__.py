"""Self-play fine-tuning laboratory over exactly enumerable sequence models.

A desk-scale environment where a tabular autoregressive model is
fine-tuned against its own previous iterate. The full response support is
enumerable, so losses, gradients, KL trajectories, and fixed-point claims
are all checkable exactly rather than approximately.
"""

from .datastore import (
    AnnotatedDataset,
    load_dataset,
    load_task,
    make_task,
    sample_dataset,
    save_dataset,
    save_task,
)
from .estimator import SelfPlayTuner
from .exceptions import ContractViolation, EngineAbort, SupportCapExceeded
from .metrics import (
    RewardSummary,
    classifier_accuracy,
    exact_classifier_accuracy,
    exact_reward_summary,
    reward_summary,
)
from .objectives import (
    LabeledBatch,
    ObjectiveSpec,
    SFTSpec,
    SIPOSpec,
    SPACESpec,
    SPINSpec,
    SSIMPOSpec,
    SPIN_DIFFERENCE,
    SPIN_MARGIN,
    loss_and_grad,
    objective_from_dict,
    objective_to_dict,
    posterior_real,
    posterior_synth,
    sft_loss,
    sigma_mu,
    sipo_loss,
    space_grad,
    space_loss,
    space_loss_shifted_logsigmoid,
    spin_loss,
    ssimpo_loss,
)
from .oracle import (
    ExactExpectation,
    MinimizerReport,
    exact_expected_loss,
    exact_loss_and_grad,
    fd_gradient,
    gradient_check_suite,
    verify_minimizer,
)
from .selfplay import (
    IterationRecord,
    OptimizerConfig,
    RunConfig,
    RunManifest,
    generate_synthetic,
    rmsprop_step,
    run,
    run_iteration,
)
from .task_model import (
    AutoregressiveTable,
    PromptDistribution,
    TaskSpec,
    Vocab,
    enumerate_support,
    kl_divergence,
    log_prob,
    sample,
    snapshot,
)

__version__ = "0.1.0"
