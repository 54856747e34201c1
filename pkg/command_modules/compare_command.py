"""
Compare Command Implementation
Function-based runner comparing the constructed transformer with the estimator.
"""

from app_config import ExperimentConfig
from cli_components import EXIT_OK, render_check_result, render_status, render_summary
from modules.harness import experiment_harness


def run_compare_command(cfg: ExperimentConfig, check: bool = False) -> int:
    """Run the comparison at n = n_grid[0] and optionally enforce the gap tolerances."""
    render_status(f"Comparing f_TF and f_LocPol at n={cfg.n_grid[0]} on {cfg.n_prompts} prompts", "start")
    result = experiment_harness.run_construction_comparison(cfg)
    render_summary({k: v for k, v in result.summary.items() if k != "construction"}, "📊 Construction vs LocPol")
    if check:
        return render_check_result(experiment_harness.check_comparison(result))
    return EXIT_OK
