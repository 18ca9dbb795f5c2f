from unittest import TestCase, TextTestResult, TestLoader, TestSuite, TextTestRunner
from logging import Logger, getLogger, basicConfig, INFO
from datetime import datetime
from tempfile import mkdtemp
from sys import path, exit
from shutil import rmtree
from pathlib import Path

path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.utils.config_loader import (
    ConfigFormatError,
    ResourceNotFoundError,
    RunConfigLoader,
    load_sentences,
    section,
    write_key_values,
)

basicConfig(level=INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger: Logger = getLogger(__name__)

SENTENCES = {
    "short": ("the bank", "a river bank", "the bank"),
    "medium": ("money in the bank", "walk by the bank", "loan from the bank"),
    "long": ("deposit at the bank today", "fish from the bank there", "the bank closed early"),
}


def sentence_lines(skip: tuple = ()) -> list[str]:
    lines = ["# context\trole\ttext"]
    for context, texts in SENTENCES.items():
        for role, text in zip(("A1", "A2", "B1"), texts):
            if (context, role) not in skip:
                lines.append(f"{context}\t{role}\t{text}")
    return lines


class TestRunConfigLoader(TestCase):
    """
    Test cases for the RunConfigLoader class.
    """

    def setUp(self) -> None:
        """Set up test environment"""
        self.test_dir: Path = Path(mkdtemp())
        self.config_file: Path = self.test_dir / "small.cfg"
        self.config_file.write_text(
            "# comment\nMODEL_N_LAYERS=2\nTRAIN_STEPS=5\nSWEEP_NAME=small\n",
            encoding="utf-8",
        )
        self.loader: RunConfigLoader = RunConfigLoader(configs_dir=self.test_dir)

    def tearDown(self) -> None:
        """Clean up test environment"""
        rmtree(self.test_dir)

    def test_load_by_name(self) -> None:
        """Test loading a config by bare name"""
        values = self.loader.load("small")
        self.assertEqual(values["MODEL_N_LAYERS"], "2")
        self.assertEqual(values["SWEEP_NAME"], "small")
        self.assertEqual(len(values), 3)

    def test_load_by_path(self) -> None:
        """Test loading a config by absolute path"""
        values = self.loader.load(str(self.config_file))
        self.assertEqual(values["TRAIN_STEPS"], "5")

    def test_load_not_found(self) -> None:
        """Test error when loading a nonexistent config"""
        with self.assertRaises(ResourceNotFoundError):
            self.loader.load("absent")

    def test_cache(self) -> None:
        """Test cache functionality and isolation of returned mappings"""
        first = self.loader.load("small")
        first["MODEL_N_LAYERS"] = "99"
        self.assertEqual(self.loader.cache_size, 1)
        self.assertEqual(self.loader.load("small")["MODEL_N_LAYERS"], "2")
        self.assertEqual(self.loader.cache_size, 1)

    def test_reload(self) -> None:
        """Test reload drops cached values"""
        self.loader.load("small")
        self.config_file.write_text("MODEL_N_LAYERS=6\n", encoding="utf-8")
        self.assertEqual(self.loader.load("small")["MODEL_N_LAYERS"], "2")
        self.assertEqual(
            self.loader.load("small", use_cache=False)["MODEL_N_LAYERS"], "6"
        )
        self.loader.reload("small")
        self.assertEqual(self.loader.cache_size, 0)
        self.loader.load("small")
        self.loader.reload()
        self.assertEqual(self.loader.cache_size, 0)

    def test_unknown_key(self) -> None:
        """Test error on keys outside the known prefixes"""
        (self.test_dir / "odd.cfg").write_text("LEARNING_RATE=1\n", encoding="utf-8")
        with self.assertRaises(ConfigFormatError):
            self.loader.load("odd")

    def test_empty_value(self) -> None:
        """Test error on keys with no value"""
        (self.test_dir / "empty.cfg").write_text("MODEL_SCALE=\n", encoding="utf-8")
        with self.assertRaises(ConfigFormatError):
            self.loader.load("empty")

    def test_list_and_exists(self) -> None:
        """Test listing and existence checks"""
        self.assertEqual(self.loader.list_configs(), ["small.cfg"])
        self.assertTrue(self.loader.exists("small"))
        self.assertFalse(self.loader.exists("absent"))


class TestKeyValueHelpers(TestCase):
    """Tests for section() and write_key_values()"""

    def setUp(self) -> None:
        self.test_dir: Path = Path(mkdtemp())

    def tearDown(self) -> None:
        rmtree(self.test_dir)

    def test_section(self) -> None:
        values = {"MODEL_D_MODEL": "32", "MODEL_SCALE": "2", "TRAIN_STEPS": "4"}
        self.assertEqual(section(values, "MODEL_"), {"d_model": "32", "scale": "2"})
        self.assertEqual(section(values, "DATA_"), {})

    def test_write_then_load(self) -> None:
        """Test written files read back, skipping None values"""
        target = write_key_values(
            self.test_dir / "nested" / "manifest.cfg",
            {"TRAIN_STEPS": 4, "MODEL_SCALE": None, "RUN_LABEL": "move x2"},
        )
        self.assertEqual(
            target.read_text(encoding="utf-8"), "RUN_LABEL=move x2\nTRAIN_STEPS=4\n"
        )
        values = RunConfigLoader(configs_dir=self.test_dir).load(str(target))
        self.assertEqual(values, {"RUN_LABEL": "move x2", "TRAIN_STEPS": "4"})


class TestSentenceFile(TestCase):
    """Tests for load_sentences()"""

    def setUp(self) -> None:
        self.test_dir: Path = Path(mkdtemp())
        self.source: Path = self.test_dir / "sentences.tsv"

    def tearDown(self) -> None:
        rmtree(self.test_dir)

    def _write(self, lines: list[str]) -> Path:
        self.source.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return self.source

    def test_complete_file(self) -> None:
        sentences = load_sentences(self._write(sentence_lines()))
        self.assertEqual(len(sentences), 9)
        self.assertEqual(sentences[("medium", "A2")], "walk by the bank")

    def test_missing_role_named(self) -> None:
        source = self._write(sentence_lines(skip=(("long", "B1"),)))
        with self.assertRaises(ConfigFormatError) as context:
            load_sentences(source)
        self.assertIn("B1", str(context.exception))
        self.assertIn("long/B1", str(context.exception))

    def test_duplicate_rejected(self) -> None:
        source = self._write(sentence_lines() + ["short\tA1\tagain the bank"])
        with self.assertRaises(ConfigFormatError):
            load_sentences(source)

    def test_unknown_context_rejected(self) -> None:
        source = self._write(sentence_lines() + ["huge\tA1\tthe bank"])
        with self.assertRaises(ConfigFormatError):
            load_sentences(source)

    def test_wrong_field_count(self) -> None:
        source = self._write(["short\tA1"])
        with self.assertRaises(ConfigFormatError):
            load_sentences(source)

    def test_short_row_after_complete_rows(self) -> None:
        source = self._write(sentence_lines() + ["", "long\tB1"])
        with self.assertRaises(ConfigFormatError) as context:
            load_sentences(source)
        self.assertIn(":12:", str(context.exception))

    def test_hash_inside_sentence_kept(self) -> None:
        lines = sentence_lines(skip=(("short", "A1"),)) + ["short\tA1\tbank #1 of 3"]
        sentences = load_sentences(self._write(lines))
        self.assertEqual(sentences[("short", "A1")], "bank #1 of 3")

    def test_shipped_sentence_files(self) -> None:
        for source in sorted((Path(__file__).resolve().parents[1] / "configs").rglob("*.tsv")):
            self.assertEqual(len(load_sentences(source)), 9, str(source))

    def test_missing_file(self) -> None:
        with self.assertRaises(ResourceNotFoundError):
            load_sentences(self.test_dir / "absent.tsv")


class TestResultCollector(TextTestResult):
    """Custom test result collector with detailed reporting"""

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.test_results = []

    def addSuccess(self, test) -> None:
        super().addSuccess(test)
        self.test_results.append({"test": test.id(), "status": "✓ PASS", "message": ""})

    def addError(self, test, err):
        super().addError(test, err)
        self.test_results.append(
            {"test": test.id(), "status": "✗ ERROR", "message": str(err[1])}
        )

    def addFailure(self, test, err):
        super().addFailure(test, err)
        self.test_results.append(
            {"test": test.id(), "status": "✗ FAIL", "message": str(err[1])}
        )


def print_test_report(result) -> None:
    """Prints a per-class test report"""
    logger.info("=" * 80)
    logger.info(f"CONFIG LOADER REPORT - {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    logger.info("=" * 80)

    by_class: dict[str, list[dict[str, str]]] = {}
    for entry in result.test_results:
        class_name, _, test_name = entry["test"].rpartition(".")
        by_class.setdefault(class_name, []).append({**entry, "name": test_name})

    for class_name, tests in sorted(by_class.items()):
        passed = sum(1 for t in tests if "✓" in t["status"])
        logger.info(f"📦 {class_name}: {passed}/{len(tests)}")
        for test in tests:
            logger.info(f"   {test['status'].split()[0]} {test['name']}")
            if test["message"]:
                logger.info(f"      └─ {test['message'][:100]}")

    failed = len(result.failures) + len(result.errors)
    logger.info(
        "✓ All tests passed successfully!"
        if result.wasSuccessful()
        else f" {failed} tests failed or had errors."
    )


def run_tests() -> TestResultCollector:
    """Runs all test cases and prints a detailed report"""
    loader = TestLoader()
    suite = TestSuite()

    suite.addTests(loader.loadTestsFromTestCase(TestRunConfigLoader))
    suite.addTests(loader.loadTestsFromTestCase(TestKeyValueHelpers))
    suite.addTests(loader.loadTestsFromTestCase(TestSentenceFile))

    runner = TextTestRunner(resultclass=TestResultCollector, verbosity=2)
    result = runner.run(suite)

    print_test_report(result)

    return result


if __name__ == "__main__":
    result = run_tests()
    exit(0 if result.wasSuccessful() else 1)
