from unittest import TestCase, TestLoader, TestSuite, TextTestRunner
from logging import Logger, getLogger, basicConfig, INFO
from tempfile import mkdtemp
from sys import path, exit
from pathlib import Path
from shutil import rmtree
import numpy as np

path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.model.checkpoint import (
    CheckpointError,
    checkpoint_load,
    checkpoint_save,
    load_model,
    read_checkpoint,
)
from src.model.transformer import build_model, forward_logits
from src.trainer.optimizer import AdamW
from src.model.config import ModelConfig

basicConfig(level=INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger: Logger = getLogger(__name__)

SHAPE = dict(n_layers=2, d_model=16, n_heads=2, vocab_size=30, max_seq_len=8)


def perturbed(config: ModelConfig, seed: int = 1):
    params = build_model(config)
    rng = np.random.default_rng(seed)
    for _, tensor in params.named_parameters():
        tensor.assign(tensor.data + rng.normal(0.0, 0.1, tensor.shape))
    params.refresh_fusions()
    return params


class TestCheckpointRoundTrip(TestCase):
    def setUp(self) -> None:
        self.temp_dir = Path(mkdtemp())
        self.config = ModelConfig(**SHAPE, variant="move", scale=2)

    def tearDown(self) -> None:
        rmtree(self.temp_dir)

    def test_float64_is_bit_exact(self) -> None:
        params = perturbed(self.config)
        target = checkpoint_save(
            self.temp_dir / "model.ckpt", params, step=7, meta={"label": "x"}
        )
        restored, checkpoint = load_model(target)
        self.assertEqual(checkpoint.step, 7)
        self.assertEqual(checkpoint.meta["label"], "x")
        self.assertEqual(restored.config, self.config)
        for (name, a), (_, b) in zip(params.named_parameters(), restored.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)
        tokens = np.array([1, 5, 29, 3])
        np.testing.assert_array_equal(
            forward_logits(params, tokens).logits.data,
            forward_logits(restored, tokens).logits.data,
        )

    def test_float32_storage(self) -> None:
        params = perturbed(self.config)
        target = checkpoint_save(self.temp_dir / "half.ckpt", params, dtype="float32")
        restored, _ = load_model(target)
        for (_, a), (_, b) in zip(params.named_parameters(), restored.named_parameters()):
            self.assertLessEqual(np.abs(a.data - b.data).max(), 1e-6)

    def test_optimizer_state_round_trip(self) -> None:
        params = perturbed(self.config)
        optimizer = AdamW(params.named_parameters())
        grads = {name: np.ones_like(t.data) for name, t in params.named_parameters()}
        optimizer.step(grads, 1e-3)
        target = checkpoint_save(self.temp_dir / "opt.ckpt", params, optimizer, step=1)

        fresh = build_model(self.config)
        fresh_optimizer = AdamW(fresh.named_parameters())
        checkpoint_load(target, fresh, fresh_optimizer)
        self.assertEqual(fresh_optimizer.step_count, 1)
        for name, array in optimizer.state_arrays().items():
            np.testing.assert_array_equal(fresh_optimizer.state_arrays()[name], array)

    def test_mla_fusion_refreshed(self) -> None:
        config = ModelConfig(**SHAPE, variant="mla", latent_dim=8)
        params = perturbed(config)
        target = checkpoint_save(self.temp_dir / "mla.ckpt", params)
        restored, _ = load_model(target)
        for block in restored.blocks:
            self.assertFalse(block.attention.fused.is_stale())


class TestCheckpointRejection(TestCase):
    def setUp(self) -> None:
        self.temp_dir = Path(mkdtemp())
        self.params = perturbed(ModelConfig(**SHAPE))
        self.target = checkpoint_save(self.temp_dir / "model.ckpt", self.params)

    def tearDown(self) -> None:
        rmtree(self.temp_dir)

    def test_missing_file(self) -> None:
        with self.assertRaises(CheckpointError):
            read_checkpoint(self.temp_dir / "absent.ckpt")

    def test_truncated_payload(self) -> None:
        blob = self.target.read_bytes()
        self.target.write_bytes(blob[:-5])
        with self.assertRaises(CheckpointError):
            read_checkpoint(self.target)

    def test_bad_header(self) -> None:
        bad = self.temp_dir / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint\n")
        with self.assertRaises(CheckpointError):
            read_checkpoint(bad)

    def test_shape_mismatch_leaves_model_untouched(self) -> None:
        other = build_model(ModelConfig(**{**SHAPE, "vocab_size": 31}))
        before = {name: t.data.copy() for name, t in other.named_parameters()}
        with self.assertRaises(CheckpointError):
            checkpoint_load(self.target, other)
        for name, tensor in other.named_parameters():
            np.testing.assert_array_equal(tensor.data, before[name])
            self.assertEqual(tensor.version, 0)

    def test_missing_tensors(self) -> None:
        move = build_model(ModelConfig(**SHAPE, variant="move", scale=1))
        with self.assertRaises(CheckpointError):
            checkpoint_load(self.target, move)

    def test_optimizer_state_required(self) -> None:
        fresh = build_model(ModelConfig(**SHAPE))
        with self.assertRaises(CheckpointError):
            checkpoint_load(self.target, fresh, AdamW(fresh.named_parameters()))

    def test_unknown_dtype(self) -> None:
        with self.assertRaises(CheckpointError):
            checkpoint_save(self.temp_dir / "x.ckpt", self.params, dtype="bfloat16")


def run_tests():
    suite = TestSuite()
    loader = TestLoader()
    for case in (TestCheckpointRoundTrip, TestCheckpointRejection):
        suite.addTests(loader.loadTestsFromTestCase(case))
    return TextTestRunner(verbosity=2).run(suite)


if __name__ == "__main__":
    result = run_tests()
    exit(0 if result.wasSuccessful() else 1)
