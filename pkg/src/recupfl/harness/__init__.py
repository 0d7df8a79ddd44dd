"""Experiment harness: TOML configs, sweeps, analysis, plots and the ``recupfl`` CLI."""

from recupfl.harness.analysis import Comparison, Curve, compare, compare_defenses, matched_grid, median_curve
from recupfl.harness.config import (
    DEFENSE_KINDS,
    PARAM_BOUNDS,
    DefenseSection,
    ExperimentConfig,
    bundled_config,
    config_from_dict,
    load_config,
)
from recupfl.harness.experiment import (
    Job,
    RoundArtifacts,
    Scenario,
    build_scenario,
    derive_seed,
    evaluate_cell,
    make_defense,
    run_attribute_count_study,
    run_attribute_weight_study,
    run_convergence,
    run_jobs,
    run_reconstruction,
    run_sweep,
    run_variant_ablation,
    run_zoo_size_study,
)
from recupfl.harness.plot import Axes, emit_plot, render_svg
from recupfl.harness.results import (
    CONVERGENCE_COLUMNS,
    SWEEP_COLUMNS,
    ConvergenceRow,
    TradeoffPoint,
    points_to_csv,
    read_points,
    write_convergence,
    write_points,
)
