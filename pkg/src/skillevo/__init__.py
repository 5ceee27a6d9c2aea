"""Co-evolution of agent skill bundles with an isolated surrogate verifier.

Submodules:

``bundle``      skill bundles, versioning and validation rules
``sandbox``     task specs, isolated environments and rollouts
``policy``      message contexts, response schemas and policy backends
``verifier``    assertion suites, surrogate reward and diagnostics
``oracle``      sealed hidden suites and fresh-environment scoring
``evolution``   the generator/verifier loop
``evaluation``  benchmark pass rates, transfer and iteration statistics
``scenarios``   scripted fixtures used by tests and demos
"""

from .bundle import (
    SkillBundle,
    SkillManifest,
    ValidationReport,
    diff_bundles,
    load_bundle,
    make_bundle,
    next_version,
    validate_bundle,
    write_bundle,
)
from .evaluation import (
    IterationStats,
    PassRateReport,
    RunRecord,
    domain_breakdown,
    export_report,
    import_report,
    iteration_stats,
    run_benchmark,
    transfer_evaluate,
)
from .evolution import (
    EvolutionConfig,
    EvolutionOutcome,
    EvolutionState,
    apply_mode,
    checklist_gate,
    run_evolution,
)
from .oracle import HiddenSuiteRef, OpaqueBit, Oracle, OracleScore, oracle_evaluate, seal_suite, to_opaque
from .policy import ConversationContext, Message, PolicyHandle, init_context, make_remote, make_scripted
from .sandbox import RolloutArtifacts, TaskSpec, clone_fresh, install_skill, provision, rollout
from .tasks import load_corpus, load_task
from .trace import TraceLog, TrajectoryEvent, parse_trace, read_trace
from .verifier import Assertion, TestSuite, build_diagnostic, generate_suite, run_suite, surrogate_reward

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
