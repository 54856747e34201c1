"""
Rates Command Implementation
Class-based approach for the excess-risk rate curve and its acceptance check.
"""

from app_config import ExperimentConfig
from cli_components import EXIT_OK, render_check_result, render_status, render_table
from modules.harness import ExperimentHarness, RateResult, experiment_harness


## Runs the n grid and reports the fitted slope
class RatesCommand:
    """Rate experiment runner; optionally also evaluates the constructed transformer."""

    def __init__(self, cfg: ExperimentConfig, check: bool = False, include_tf: bool = False,
                 harness: ExperimentHarness = None):
        self.cfg = cfg
        self.check = check
        self.include_tf = include_tf
        self.harness = harness or experiment_harness

    def run(self) -> int:
        render_status(f"Rate experiment over n={self.cfg.n_grid} with {self.cfg.tasks} tasks", "start")
        result = self.harness.run_rate_experiment(self.cfg, include_tf=self.include_tf)
        self._render(result)
        if self.check:
            return render_check_result(self.harness.check_rates(result, self.cfg))
        return EXIT_OK

    def _render(self, result: RateResult):
        render_table(result.rows, "Excess risk by n")
        render_status(f"Slope {result.slope:.3f} ± {result.half_width:.3f}, "
                      f"expected {result.expected_slope:.3f}", "result")
        if result.tf_slope is not None:
            render_status(f"Constructed transformer slope {result.tf_slope:.3f}", "result")
