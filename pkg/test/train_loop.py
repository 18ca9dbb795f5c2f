from unittest import TestCase, TestLoader, TestSuite, TextTestRunner
from logging import Logger, getLogger, basicConfig, INFO
from pandas.testing import assert_frame_equal
from dataclasses import asdict
from tempfile import mkdtemp
from sys import path, exit
from pathlib import Path
from shutil import rmtree
from math import log
import numpy as np

path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.trainer.train_loop import (
    ComparisonMismatchError,
    LedgerRecord,
    RunLedger,
    check_comparison,
    evaluate,
    make_optimizer,
    run_experiment,
    run_sweep,
    slug,
    train_run,
    train_step,
)
from src.data.fact_corpus import FactTaskSpec, gen_fact_corpus
from src.trainer.optimizer import cosine_lr
from src.model.checkpoint import checkpoint_save
from src.model.transformer import build_model
from src.data.stream import training_batches
from src.utils.ledger_store import LedgerStore
from src.trainer.config import TrainConfig
from src.model.config import ConfigError, ModelConfig

basicConfig(level=INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger: Logger = getLogger(__name__)

TASK = gen_fact_corpus(
    FactTaskSpec(key_vocab=16, n_facts=12, definition_length=3, train_repeats=4)
).task()
TRAIN = TrainConfig(steps=6, batch_size=4, seq_len=8, eval_interval=3, warmup_ratio=0.2)


def config(variant: str = "standard", **extra) -> ModelConfig:
    return ModelConfig(
        n_layers=2,
        d_model=16,
        n_heads=2,
        vocab_size=TASK.vocab_size,
        max_seq_len=8,
        variant=variant,
        **extra,
    )


class TestTrainStep(TestCase):
    def test_loss_decreases_on_repeated_batch(self) -> None:
        params = build_model(config("move", scale=2))
        optimizer = make_optimizer(params, TRAIN)
        batch = next(training_batches(TASK.train_tokens, 8, 4, seed=0, steps=1))
        first = train_step(params, optimizer, batch, 1e-2, 1.0)
        for _ in range(5):
            last = train_step(params, optimizer, batch, 1e-2, 1.0)
        self.assertLess(last.loss, first.loss)
        self.assertGreater(first.grad_norm, 0.0)
        self.assertTrue(np.any(params.bank.table.data))

    def test_untrained_loss_near_uniform(self) -> None:
        params = build_model(config())
        report = evaluate(params, TASK)
        self.assertLess(abs(report.loss_per_token - log(TASK.vocab_size)), 0.1)
        self.assertEqual(report.byte_count, report.token_count)
        self.assertEqual(report.token_count, TASK.eval_bytes)
        self.assertAlmostEqual(report.bpb, report.loss_per_token / log(2.0), places=12)

    def test_evaluate_window_cap(self) -> None:
        report = evaluate(build_model(config()), TASK, batch_size=4, max_windows=5)
        self.assertEqual(report.token_count, 5 * 3)


class TestTrainRun(TestCase):
    def setUp(self) -> None:
        self.temp_dir = Path(mkdtemp())

    def tearDown(self) -> None:
        rmtree(self.temp_dir)

    def test_deterministic_ledger(self) -> None:
        first = train_run(build_model(config("move", scale=2)), TRAIN, TASK)
        again = train_run(build_model(config("move", scale=2)), TRAIN, TASK)
        self.assertEqual([r.step for r in first.records], [3, 6])
        assert_frame_equal(first.deterministic_frame(), again.deterministic_frame())
        self.assertEqual(first.audit["bank_parameters"], TASK.vocab_size * 2 * 16)

    def test_resume_matches_uninterrupted(self) -> None:
        label = "move x1"
        full_params = build_model(config("move", scale=1))
        full = train_run(full_params, TRAIN, TASK, label)

        params = build_model(config("move", scale=1))
        optimizer = make_optimizer(params, TRAIN)
        batches = training_batches(TASK.train_tokens, 8, 4, TRAIN.seed, TRAIN.steps)
        for _ in range(3):
            batch = next(batches)
            lr = cosine_lr(batch.index, 6, TRAIN.learning_rate, 0.2, TRAIN.min_lr_ratio)
            result = train_step(params, optimizer, batch, lr, TRAIN.clip_norm)
        report = evaluate(params, TASK, TRAIN.batch_size)
        record = LedgerRecord(3, result.loss, report.loss_per_token, report.bpb, lr, result.grad_norm, 0.0)
        target = checkpoint_save(
            self.temp_dir / "partial.ckpt",
            params,
            optimizer,
            3,
            meta={"ledger": [asdict(record)], "label": label},
        )

        resumed_params = build_model(config("move", scale=1))
        resumed = train_run(resumed_params, TRAIN, TASK, label, resume_from=target)
        assert_frame_equal(full.deterministic_frame(), resumed.deterministic_frame())
        for (name, a), (_, b) in zip(
            full_params.named_parameters(), resumed_params.named_parameters()
        ):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_windows_longer_than_context_rejected(self) -> None:
        with self.assertRaises(ConfigError):
            train_run(build_model(config()), TRAIN.derive(seq_len=9), TASK)

    def test_checkpoints_written(self) -> None:
        train = TRAIN.derive(checkpoint_interval=2)
        train_run(build_model(config()), train, TASK, output_dir=self.temp_dir)
        self.assertTrue((self.temp_dir / "standard" / "model.ckpt").exists())

    def test_ledger_steps_increase(self) -> None:
        ledger = RunLedger("x")
        ledger.append(LedgerRecord(2, 1.0, 1.0, 1.0, 0.1, 1.0, 0.0))
        with self.assertRaises(ValueError):
            ledger.append(LedgerRecord(2, 1.0, 1.0, 1.0, 0.1, 1.0, 0.0))


class TestComparison(TestCase):
    def setUp(self) -> None:
        self.temp_dir = Path(mkdtemp())

    def tearDown(self) -> None:
        rmtree(self.temp_dir)

    def test_mismatches_rejected(self) -> None:
        with self.assertRaises(ComparisonMismatchError):
            check_comparison([config(), config("move", scale=2, seed=1)], TASK)
        with self.assertRaises(ComparisonMismatchError):
            check_comparison([config(), config()], TASK)
        with self.assertRaises(ComparisonMismatchError):
            check_comparison([config().derive(vocab_size=300)], TASK)
        with self.assertRaises(ComparisonMismatchError):
            check_comparison([], TASK)
        with self.assertRaises(ComparisonMismatchError):
            run_experiment([config()], TRAIN, TASK, baseline="move x2")

    def test_experiment_outputs(self) -> None:
        configs = [config(), config("move", scale=2), config("lave", scale=1)]
        result = run_experiment(configs, TRAIN, TASK, self.temp_dir)
        self.assertEqual(result.baseline, "standard")
        self.assertEqual(list(result.summary["label"]), ["standard", "move x2", "lave x1"])
        baseline_row = result.summary[result.summary["label"] == "standard"].iloc[0]
        self.assertEqual(baseline_row["loss_gain"], 0.0)
        for label in ("standard", "move x2", "lave x1"):
            self.assertTrue((self.temp_dir / f"ledger_{slug(label)}.jsonl").exists())
            self.assertTrue((self.temp_dir / slug(label) / "model.ckpt").exists())
        self.assertIn("final_bpb", (self.temp_dir / "summary.txt").read_text())

    def test_sweep_medians_and_store(self) -> None:
        store = LedgerStore(self.temp_dir / "ledger.sqlite")
        store.create_schema()
        try:
            medians = run_sweep(
                [config(), config("move", scale=2)],
                TRAIN.derive(steps=3),
                TASK,
                seeds=[0, 1],
                sweep="tiny",
                output_dir=self.temp_dir,
                store=store,
            )
            self.assertEqual(list(medians["seeds"]), [2, 2])
            stored = store.median_final_loss("tiny")
            self.assertEqual(sorted(stored["label"]), ["move x2", "standard"])
            ledger = store.select_query("SELECT COUNT(*) AS n FROM ledger")
            self.assertEqual(int(ledger["n"].iloc[0]), 2 * 2 * 1)
        finally:
            store.close()
        self.assertTrue((self.temp_dir / "seed_1" / "summary.txt").exists())


def run_tests():
    suite = TestSuite()
    loader = TestLoader()
    for case in (TestTrainStep, TestTrainRun, TestComparison):
        suite.addTests(loader.loadTestsFromTestCase(case))
    return TextTestRunner(verbosity=2).run(suite)


if __name__ == "__main__":
    result = run_tests()
    exit(0 if result.wasSuccessful() else 1)
