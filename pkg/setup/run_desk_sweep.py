from logging import Logger, getLogger, basicConfig, INFO
from sys import exit, path
from pathlib import Path

project_root = Path(__file__).resolve().parent.parent
path.insert(0, str(project_root))

from src.trainer.train_loop import run_sweep
from src.config.run_config import load_run_config
from src.utils.ledger_store import LedgerStore
from src.config.settings import get_settings

SWEEP_CONFIG = "facts_desk"
QUERY_SELECT_TABLES = "SELECT name FROM sqlite_master WHERE type='table';"


def setup_logging() -> Logger:
    """Configures and returns the logger."""
    basicConfig(
        level=INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(funcName)s - %(message)s",
    )
    return getLogger(__name__)


def main() -> None:
    """
    Runs the desk-scale fact-recall sweep (every variant, every seed) and
    stores ledgers and summaries in the ledger database.
    """
    logger: Logger = setup_logging()

    try:
        logger.info(f"Loading sweep config '{SWEEP_CONFIG}'...")
        run = load_run_config(SWEEP_CONFIG)
        configs = run.sweep_configs()
        logger.info(f"Variants: {[c.label for c in configs]}")

        logger.info("Generating the task data...")
        data = run.load_task()

        output = Path(get_settings().output_dir) / f"sweep-{run.sweep.name}"
        with LedgerStore() as store:
            medians = run_sweep(
                configs,
                run.train,
                data,
                run.sweep.seed_list(),
                run.sweep.name,
                output,
                store,
                run.sweep.baseline,
            )
            tables_df = store.select_query(QUERY_SELECT_TABLES)
            logger.info(f"Ledger tables: {tables_df['name'].tolist()}")
            logger.info(f"\n--- Stored medians ---\n{store.median_final_loss(run.sweep.name)}")

        logger.info(f"\n--- Sweep medians ---\n{medians}\n--------------------")

    except Exception as e:
        logger.error("FATAL ERROR during the desk sweep.", exc_info=True)
        exit(1)


if __name__ == "__main__":
    main()
