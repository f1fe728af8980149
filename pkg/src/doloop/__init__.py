"""doloop: closed-loop causal experimental design.

An oracle environment answers do-interventions, a per-node neural learner
estimates the mechanisms, and proposal policies (random, round-robin,
max-variance, PPO, and a preference-trained policy) decide where and at what
value to intervene next.
"""

from .dataset import Dataset, Intervention, load_dataset_csv, save_dataset_csv
from .graph import CausalGraph, descendants, validate_graph
from .scm import (
    Analytic,
    Linear,
    OracleScm,
    Root,
    build_benchmark_5node,
    build_benchmark_15node,
    load_scm_config,
    mechanism_value,
    sample,
    save_scm_config,
)
from .duffing import (
    Clamp,
    CouplingEstimator,
    DuffingParams,
    OscState,
    acceleration,
    coupling_error,
    rk4_step,
    sample_trajectory,
)
from .archive import Archive, RegimeQuery, generate_synthetic_archive, load_archive, query, save_archive
from .learner import MechanismLearner, NodePredictor, ReplayBuffer, RootModel, ValidationSet, init_learner
from .policy import (
    Candidate,
    History,
    StateFeatures,
    TrainablePolicy,
    ValueGrid,
    featurize,
    propose_max_variance,
    propose_random,
    propose_round_robin,
)
from .trainers import (
    DpoConfig,
    PpoBatch,
    PpoConfig,
    PreferencePair,
    ValueCritic,
    compute_gae,
    dpo_loss,
    dpo_update,
    make_preference_pairs,
    ppo_update,
    refresh_reference,
)
from .orchestrator import (
    ConvergenceConfig,
    ExperimentLoop,
    LoopConfig,
    ProbeConfig,
    RewardBreakdown,
    RewardConfig,
    check_convergence,
    diversity,
    estimate_info_gain,
    make_policy_handle,
    node_importance,
    score,
)
from .envs import ArchiveEnvironment, DuffingEnvironment, ScmEnvironment, make_environment
from .stats import bonferroni, bonferroni_threshold, cohens_d, paired_t_test, summarize
from .config import RunConfig, load_config, save_config
from .runner import RunResult, run_experiment, run_single, write_experiment

__version__ = "0.1.0"
