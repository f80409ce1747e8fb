"""Competing birth processes and feedback urns.

A toolkit for simulating continuous-time races between independently growing
integer-valued agents, the discrete balls-in-bins process with feedback that
their exponential embedding induces, and the statistics that separate the two
long-run regimes: leader fixation versus endless reshuffling of the ranking.
"""

from .dispersion import (
    DiscreteDistribution,
    DispersionReport,
    FuzzReport,
    PetrovTable,
    ShiftCheckReport,
    StepFunction,
    dispersion_D,
    empirical_Q,
    petrov_probe,
    run_unimodal_fuzz,
    three_series_classifier,
    unimodal_shift_check,
)
from .errors import (
    NotYetReachedError,
    NumericRangeError,
    ResultPersistenceError,
    SchemaVersionError,
    UnsupportedFamilyError,
)
from .experiments import ExperimentSpec, run_experiment
from .increments import (
    FeedbackFunction,
    SymmetrizedIncrement,
    WaitingTimeModel,
    analytic_D,
    make_exponential_model,
    parse_feedback,
    parse_model,
    sample_increment,
    symmetrized_sampler,
)
from .montecarlo import (
    ExperimentResult,
    SummaryStats,
    derive_rng,
    load_results,
    map_replicates,
    persist_results,
    wilson_interval,
)
from .race import (
    EventHorizon,
    RaceConfig,
    TimeHorizon,
    Trajectory,
    dump_events_csv,
    dump_events_jsonl,
    hitting_time,
    jump_chain,
    simulate_race,
    value_at,
)
from .ranking import (
    PermutationCoverage,
    XiConvergenceReport,
    consistent_orderings,
    update_coverage,
    xi,
    xi_convergence_estimate,
)
from .urn import (
    CouplingReport,
    UrnState,
    UrnTrajectoryRecorder,
    coupling_equivalence_test,
    exact_sequence_distribution,
    run_urn,
    urn_step,
)

__version__ = "0.1.0"
