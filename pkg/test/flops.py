from unittest import TestCase, TestLoader, TestSuite, TextTestRunner
from logging import Logger, getLogger, basicConfig, INFO
from fractions import Fraction
from sys import path, exit
from pathlib import Path
import numpy as np

path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.costmodel.flops import (
    bank_params,
    flop_report,
    flops_move,
    flops_std,
    measure_forward,
    overhead_ratio,
)
from src.model.transformer import build_model, forward_logits
from src.model.config import ModelConfig

basicConfig(level=INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger: Logger = getLogger(__name__)


class TestAnalyticCosts(TestCase):
    def test_worked_example(self) -> None:
        ratio, value = overhead_ratio(2048, 16, 32, 2048)
        self.assertEqual(ratio, Fraction(528, 28672))
        self.assertEqual(f"{100 * value:.2f}%", "1.84%")

    def test_standard_block(self) -> None:
        self.assertEqual(flops_std(2048, 2048).c_std, 117_440_512)
        no_context = flops_std(768, 0)
        self.assertEqual(no_context.c_sdpa, 0)
        self.assertEqual(no_context.c_std, 24 * 768 * 768)
        with self.assertRaises(ValueError):
            flops_std(0, 10)

    def test_router_cost(self) -> None:
        self.assertEqual(flops_move(2048, 16, 32), 2_162_688)
        self.assertEqual(flops_move(768, 12, 0), 2 * 768 * 12)
        with self.assertRaises(ValueError):
            flops_move(768, 12, -1)

    def test_ratio_without_slots(self) -> None:
        ratio, _ = overhead_ratio(768, 12, 0, 2048)
        self.assertEqual(ratio, Fraction(12, 13312))

    def test_ratio_reproduces_costs(self) -> None:
        for d, heads, slots, context in ((64, 4, 2, 32), (1024, 4, 2, 512), (768, 12, 6, 0)):
            ratio, _ = overhead_ratio(d, heads, slots, context)
            self.assertEqual(
                ratio * flops_std(d, context).c_std, flops_move(d, heads, slots)
            )

    def test_bank_sizes(self) -> None:
        self.assertEqual(bank_params(65536, 6, 768), 301_989_888)
        self.assertEqual(bank_params(65536, 12, 768), 603_979_776)
        with self.assertRaises(ValueError):
            bank_params(-1, 1, 1)

    def test_report_lines(self) -> None:
        report = flop_report(2048, 16, 32, 2048)
        text = report.render()
        self.assertIn("528/28672", text)
        self.assertIn("1.84%", text)
        records = report.records()
        self.assertEqual(records["ratio"], "528/28672")
        self.assertEqual(records["ratio_reduced"], "33/1792")
        self.assertEqual(records["c_move"], "2162688")
        self.assertIn("output head", records["excluded"])


class TestMeasuredCosts(TestCase):
    """Counted matmuls of a real forward pass agree with the closed forms."""

    def setUp(self) -> None:
        self.config = ModelConfig(
            n_layers=2,
            d_model=32,
            n_heads=4,
            vocab_size=50,
            max_seq_len=16,
            variant="move",
            scale=2,
        )
        self.params = build_model(self.config)
        self.tokens = np.arange(16) % 50

    def test_counted_matches_analytic(self) -> None:
        cost = measure_forward(
            lambda tokens: forward_logits(self.params, tokens),
            self.tokens,
            n_layers=self.config.n_layers,
        )
        expected = flops_std(32, 16)
        self.assertEqual(cost.flops_per_token("router"), flops_move(32, 4, 2))
        self.assertEqual(cost.flops_per_token("router"), 768)
        self.assertEqual(cost.flops_per_token("projections"), expected.c_proj)
        self.assertEqual(cost.flops_per_token("ffn"), expected.c_ffn)
        self.assertEqual(cost.flops_per_token("sdpa"), expected.c_sdpa)
        self.assertGreater(cost.flops_per_token("excluded"), 0)

    def test_standard_has_no_router(self) -> None:
        params = build_model(self.config.derive(variant="standard", scale=None))
        cost = measure_forward(lambda tokens: forward_logits(params, tokens), self.tokens)
        self.assertEqual(cost.flops_per_token("router"), 0)


def run_tests():
    suite = TestSuite()
    loader = TestLoader()
    for case in (TestAnalyticCosts, TestMeasuredCosts):
        suite.addTests(loader.loadTestsFromTestCase(case))
    return TextTestRunner(verbosity=2).run(suite)


if __name__ == "__main__":
    result = run_tests()
    exit(0 if result.wasSuccessful() else 1)
