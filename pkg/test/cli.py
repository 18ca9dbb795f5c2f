from unittest import TestCase, TestLoader, TestSuite, TextTestRunner
from logging import Logger, getLogger, basicConfig, INFO
from contextlib import redirect_stderr, redirect_stdout
from unittest.mock import patch
from tempfile import mkdtemp
from sys import path, exit
from typing import List, Tuple
from pathlib import Path
from shutil import rmtree
from io import StringIO

path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.config.settings import PATH_ROOT, LabSettings
from src.routelab.traces import import_trace
from src.cli.main import main

basicConfig(level=INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger: Logger = getLogger(__name__)

TINY_CONFIG = str(PATH_ROOT / "configs" / "tiny.cfg")
TRACE_SENTENCES = """short\tA1\t0 7 9 1
short\tA2\t0 7 9 1 2
short\tB1\t0 4 7 9
medium\tA1\t0 3 5 1 7 9 1
medium\tA2\t0 3 6 1 7 9 1
medium\tB1\t0 8 8 1 7 9 1
long\tA1\t0 3 5 1 20 21 22 23 0 7 9 1
long\tA2\t0 3 6 1 20 21 22 24 0 7 9 1
long\tB1\t0 10 11 1 30 31 32 33 0 7 9 1
"""


def run_cli(argv: List[str]) -> Tuple[int, str, str]:
    out, err = StringIO(), StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def key_values(text: str) -> dict:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


class TestFlopsCommand(TestCase):
    def test_worked_example(self) -> None:
        code, out, _ = run_cli(
            ["flops", "--d", "2048", "--heads", "16", "--slots", "32", "--context", "2048"]
        )
        self.assertEqual(code, 0)
        self.assertIn("528/28672", out)
        self.assertIn("1.84%", out)

    def test_machine_readable(self) -> None:
        code, out, _ = run_cli(
            ["flops", "--d", "768", "--heads", "12", "--slots", "0", "--context", "2048",
             "--machine-readable"]
        )
        self.assertEqual(code, 0)
        values = key_values(out)
        self.assertEqual(values["ratio"], "12/13312")
        self.assertEqual(values["c_move"], str(2 * 768 * 12))

    def test_dimensions_from_config(self) -> None:
        code, out, _ = run_cli(["flops", "--config", TINY_CONFIG, "--machine-readable"])
        self.assertEqual(code, 0)
        values = key_values(out)
        self.assertEqual(values["d"], "32")
        self.assertEqual(values["slots"], "2")
        self.assertEqual(values["context"], "16")

    def test_missing_dimensions(self) -> None:
        code, _, err = run_cli(["flops", "--d", "64"])
        self.assertEqual(code, 1)
        self.assertIn("--heads", err)


class TestUsageErrors(TestCase):
    def test_unknown_command(self) -> None:
        self.assertEqual(run_cli(["distill"])[0], 1)

    def test_version(self) -> None:
        self.assertEqual(run_cli(["--version"])[0], 0)

    def test_missing_config_file(self) -> None:
        code, _, err = run_cli(["train", "--config", "/nonexistent/run.cfg"])
        self.assertEqual(code, 1)
        self.assertIn("not found", err)

    def test_train_without_config(self) -> None:
        self.assertEqual(run_cli(["train"])[0], 1)

    def test_missing_checkpoint_is_runtime_error(self) -> None:
        code, _, _ = run_cli(
            ["eval", "--config", TINY_CONFIG, "--checkpoint", "/nonexistent/model.ckpt"]
        )
        self.assertEqual(code, 2)


class TestEndToEnd(TestCase):
    """Train, evaluate, decode and trace the tiny configuration in a scratch directory."""

    @classmethod
    def setUpClass(cls) -> None:
        cls.temp_dir = Path(mkdtemp())
        cls.train_dir = cls.temp_dir / "train"
        cls.code, cls.out, cls.err = run_cli(
            ["train", "--config", TINY_CONFIG, "--output", str(cls.train_dir)]
        )
        cls.checkpoint = cls.train_dir / "move_x2" / "model.ckpt"

    @classmethod
    def tearDownClass(cls) -> None:
        rmtree(cls.temp_dir)

    def test_train_outputs(self) -> None:
        self.assertEqual(self.code, 0, self.err)
        values = key_values(self.out)
        self.assertEqual(values["label"], "move x2")
        self.assertGreater(float(values["final_bpb"]), 0.0)
        self.assertTrue(self.checkpoint.exists())
        self.assertTrue((self.train_dir / "ledger_move_x2.jsonl").exists())
        manifest = (self.train_dir / "manifest.cfg").read_text(encoding="utf-8")
        self.assertIn("RUN_SUBCOMMAND=train", manifest)
        self.assertIn("MODEL_SCALE=2", manifest)

    def test_eval_reproduces_final_loss(self) -> None:
        code, out, err = run_cli(
            [
                "eval",
                "--config",
                TINY_CONFIG,
                "--checkpoint",
                str(self.checkpoint),
                "--output",
                str(self.temp_dir / "eval"),
            ]
        )
        self.assertEqual(code, 0, err)
        values = key_values(out)
        self.assertEqual(int(values["token_count"]), 12 * 3)
        self.assertEqual(float(values["bpb"]), float(key_values(self.out)["final_bpb"]))

    def test_generate(self) -> None:
        code, out, err = run_cli(
            [
                "generate",
                "--checkpoint",
                str(self.checkpoint),
                "--prompt-ids",
                "0,7,1",
                "--steps",
                "3",
                "--output",
                str(self.temp_dir / "generate"),
            ]
        )
        self.assertEqual(code, 0, err)
        tokens = key_values(out)["tokens"].split(",")
        self.assertEqual(tokens[:3], ["0", "7", "1"])
        self.assertEqual(len(tokens), 6)

    def test_generate_rejects_bad_ids(self) -> None:
        code, _, _ = run_cli(
            ["generate", "--checkpoint", str(self.checkpoint), "--prompt-ids", "0,x"]
        )
        self.assertEqual(code, 1)

    def test_trace(self) -> None:
        sentences = self.temp_dir / "sentences.tsv"
        sentences.write_text(TRACE_SENTENCES, encoding="utf-8")
        output = self.temp_dir / "trace"
        code, out, err = run_cli(
            [
                "trace",
                "--checkpoint",
                str(self.checkpoint),
                "--sentences",
                str(sentences),
                "--target",
                "7 9",
                "--tokenizer",
                "ids",
                "--output",
                str(output),
            ]
        )
        self.assertEqual(code, 0, err)
        self.assertIn("rows=60", out)
        table = import_trace(output / "trace_table.csv")
        self.assertEqual(len(table), 60)
        self.assertTrue((output / "trace_heads.csv").exists())
        self.assertTrue((output / "trace_summary.csv").exists())

    def test_trace_missing_role(self) -> None:
        sentences = self.temp_dir / "partial.tsv"
        sentences.write_text("short\tA1\t0 7 9 1\n", encoding="utf-8")
        code, _, err = run_cli(
            [
                "trace",
                "--checkpoint",
                str(self.checkpoint),
                "--sentences",
                str(sentences),
                "--target",
                "7 9",
                "--tokenizer",
                "ids",
                "--output",
                str(self.temp_dir / "partial"),
            ]
        )
        self.assertEqual(code, 1)
        self.assertIn("A2", err)


class TestSweepCommand(TestCase):
    def setUp(self) -> None:
        self.temp_dir = Path(mkdtemp())

    def tearDown(self) -> None:
        rmtree(self.temp_dir)

    def test_single_seed_sweep(self) -> None:
        settings = LabSettings(ledger_db=self.temp_dir / "ledger.sqlite")
        with patch("src.cli.main.get_settings", return_value=settings):
            code, out, err = run_cli(
                [
                    "sweep",
                    "--config",
                    TINY_CONFIG,
                    "--seed",
                    "0",
                    "--output",
                    str(self.temp_dir / "sweep"),
                ]
            )
        self.assertEqual(code, 0, err)
        for label in ("standard", "move x2", "lave x1"):
            self.assertIn(label, out)
        self.assertTrue((self.temp_dir / "ledger.sqlite").exists())
        self.assertTrue((self.temp_dir / "sweep" / "seed_0" / "summary.txt").exists())


def run_tests():
    suite = TestSuite()
    loader = TestLoader()
    for case in (TestFlopsCommand, TestUsageErrors, TestEndToEnd, TestSweepCommand):
        suite.addTests(loader.loadTestsFromTestCase(case))
    return TextTestRunner(verbosity=2).run(suite)


if __name__ == "__main__":
    result = run_tests()
    exit(0 if result.wasSuccessful() else 1)
