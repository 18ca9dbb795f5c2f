from logging import Logger, getLogger, basicConfig, INFO
from sys import path as sys_path, exit
from tempfile import mkdtemp
from sqlite3 import Error
from shutil import rmtree
from pathlib import Path

from pandas import DataFrame

project_root = Path(__file__).resolve().parent.parent
sys_path.insert(0, str(project_root))

from src.utils.ledger_store import LEDGER_COLUMNS, SUMMARY_COLUMNS, LedgerStore

SAMPLE_LEDGER = DataFrame(
    [
        ("tiny", 0, "standard", 10, 3.1, 3.2, 4.6, 0.003, 1.2, 0.5),
        ("tiny", 0, "standard", 20, 2.9, 3.0, 4.3, 0.0003, 0.9, 1.0),
        ("tiny", 0, "move x2", 10, 3.0, 3.1, 4.5, 0.003, 1.1, 0.6),
    ],
    columns=LEDGER_COLUMNS,
)

SAMPLE_SUMMARY = DataFrame(
    [
        ("tiny", 0, "standard", 3.0, 4.3, 1000, 0, 0, 0.0, 0.0),
        ("tiny", 1, "standard", 3.2, 4.5, 1000, 0, 0, 0.0, 0.0),
        ("tiny", 2, "standard", 3.4, 4.7, 1000, 0, 0, 0.0, 0.0),
        ("tiny", 0, "move x2", 2.8, 4.0, 1200, 128, 72, 0.2, 0.3),
        ("tiny", 1, "move x2", 2.6, 3.8, 1200, 128, 72, 0.6, 0.7),
        ("other", 0, "standard", 9.0, 9.0, 1000, 0, 0, 0.0, 0.0),
    ],
    columns=SUMMARY_COLUMNS,
)

basicConfig(
    level=INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(funcName)s - %(message)s",
)
logger: Logger = getLogger(__name__)


def _store_dir() -> Path:
    return Path(mkdtemp())


def test_connection() -> None:
    """Test database connection and schema creation."""
    workdir = _store_dir()
    try:
        with LedgerStore(workdir / "nested" / "ledger.sqlite") as store:
            assert store.conn is not None, "Connection object is None"
            tables = store.select_query(
                "SELECT name FROM sqlite_master WHERE type = 'table' ORDER BY name"
            )["name"].tolist()
            assert tables == ["ledger", "summary"], f"Unexpected tables: {tables}"
        logger.info("Connection test passed")
    except (Error, AssertionError) as e:
        logger.error(f"Connection test failed: {e}")
        raise
    finally:
        rmtree(workdir)


def test_insert_ledger() -> None:
    """Insert ledger rows and read them back in order."""
    workdir = _store_dir()
    try:
        with LedgerStore(workdir / "ledger.sqlite") as store:
            inserted = store.insert_ledger(SAMPLE_LEDGER, batch_size=2)
            df = store.select_query("SELECT * FROM ledger WHERE label = ?", ("standard",))
        assert inserted == 3, f"Expected 3 rows inserted, got {inserted}"
        assert df["step"].tolist() == [10, 20], f"Unexpected steps: {df['step'].tolist()}"
        assert df.columns.tolist() == LEDGER_COLUMNS, "Column mismatch"
        logger.info(f"{inserted} ledger rows inserted")
    except (Error, AssertionError) as e:
        logger.error(f"Error inserting ledger rows: {e}")
        raise
    finally:
        rmtree(workdir)


def test_missing_columns() -> None:
    """A frame without the ledger columns is rejected before writing."""
    workdir = _store_dir()
    try:
        with LedgerStore(workdir / "ledger.sqlite") as store:
            try:
                store.insert_ledger(SAMPLE_LEDGER.drop(columns=["bpb"]))
            except ValueError as e:
                assert "bpb" in str(e), f"Error does not name the column: {e}"
            else:
                raise AssertionError("Missing column was accepted")
            count = store.select_query("SELECT COUNT(*) AS n FROM ledger")["n"].item()
        assert count == 0, f"Rows written despite the error: {count}"
        logger.info("Missing column rejected")
    finally:
        rmtree(workdir)


def test_median_final_loss() -> None:
    """Median across seeds per label, restricted to one sweep."""
    workdir = _store_dir()
    try:
        with LedgerStore(workdir / "ledger.sqlite") as store:
            store.insert_summary(SAMPLE_SUMMARY)
            medians = store.median_final_loss("tiny").set_index("label")
            empty = store.median_final_loss("absent")
        assert medians.loc["standard", "seeds"] == 3
        assert abs(medians.loc["standard", "median_eval_loss"] - 3.2) < 1e-12
        assert abs(medians.loc["move x2", "median_eval_loss"] - 2.7) < 1e-12
        assert abs(medians.loc["move x2", "median_bpb"] - 3.9) < 1e-12
        assert empty.empty and "median_bpb" in empty.columns
        logger.info(f"Medians:\n{medians}")
    except (Error, AssertionError) as e:
        logger.error(f"Error computing medians: {e}")
        raise
    finally:
        rmtree(workdir)


def test_delete_tables() -> None:
    """Dropped tables come back empty with create_schema."""
    workdir = _store_dir()
    try:
        store = LedgerStore(workdir / "ledger.sqlite")
        store.create_schema()
        store.insert_summary(SAMPLE_SUMMARY)
        store.delete_tables(["summary"])
        store.create_schema()
        count = store.select_query("SELECT COUNT(*) AS n FROM summary")["n"].item()
        store.close()
        assert count == 0, f"Summary table not reset: {count}"
        logger.info("Tables deleted successfully")
    except (Error, AssertionError) as e:
        logger.error(f"Error deleting tables: {e}")
        raise
    finally:
        rmtree(workdir)


def main() -> int:
    """Run all tests."""
    logger.info("=" * 50)
    logger.info("STARTING LEDGER STORE TESTS")
    logger.info("=" * 50)

    tests = [
        test_connection,
        test_insert_ledger,
        test_missing_columns,
        test_median_final_loss,
        test_delete_tables,
    ]

    passed = 0
    failed = 0

    for test in tests:
        try:
            test()
            passed += 1
        except Exception:
            failed += 1

    logger.info("=" * 50)
    logger.info(f"TESTS COMPLETED: {passed} passed, {failed} failed")
    logger.info("=" * 50)
    return failed


if __name__ == "__main__":
    exit(1 if main() else 0)
