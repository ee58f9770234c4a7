from headfuse import plotting, wire
from headfuse.evaluation import StrategyRow, StrategyTable, fp_threshold_sweep

PNG = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    return path.read_bytes()[:8] == PNG


class TestPlots:
    def test_sweep(self, tmp_path):
        res = fp_threshold_sweep([(0.3, False), (0.6, False), (0.8, True)], [0.0, 0.5, 0.7, 1.0])
        assert is_png(plotting.plot_sweep(res, tmp_path / "s.png"))

    def test_sweep_without_zero_point(self, tmp_path):
        res = fp_threshold_sweep([(1.0, False)], [0.5, 1.0])
        assert is_png(plotting.plot_sweep(res, tmp_path / "s.png"))

    def test_bandwidth(self, tmp_path):
        assert is_png(plotting.plot_bandwidth(wire.preset_report("opv2v_like"), tmp_path / "b.png"))

    def test_strategies_skip_rows_without_ap(self, tmp_path):
        table = StrategyTable([StrategyRow("no_fusion", 0.5, 0.3, 0.0, 0.0),
                               StrategyRow("intermediate_reference", None, None, 600.0, 1e6)])
        assert is_png(plotting.plot_strategies(table, tmp_path / "t.png"))
