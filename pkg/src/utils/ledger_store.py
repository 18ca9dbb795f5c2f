from logging import Logger, basicConfig, getLogger, INFO
from sqlite3 import Connection, connect, Error
from pandas import DataFrame, read_sql_query
from typing import List, Optional
from pathlib import Path
from sys import path
import threading

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.config.settings import get_settings

LEDGER_TABLE = "ledger"
SUMMARY_TABLE = "summary"

SCHEMA_SQL = f"""
    CREATE TABLE IF NOT EXISTS {LEDGER_TABLE} (
        sweep TEXT NOT NULL,
        seed INTEGER NOT NULL,
        label TEXT NOT NULL,
        step INTEGER NOT NULL,
        train_loss REAL,
        eval_loss REAL,
        bpb REAL,
        lr REAL,
        grad_norm REAL,
        wall_time REAL
    );
    CREATE TABLE IF NOT EXISTS {SUMMARY_TABLE} (
        sweep TEXT NOT NULL,
        seed INTEGER NOT NULL,
        label TEXT NOT NULL,
        final_eval_loss REAL,
        final_bpb REAL,
        parameters INTEGER,
        bank_parameters INTEGER,
        router_parameters INTEGER,
        loss_gain REAL,
        bpb_gain REAL
    );
    CREATE INDEX IF NOT EXISTS idx_summary_sweep ON {SUMMARY_TABLE} (sweep, label);
"""

LEDGER_COLUMNS: List[str] = [
    "sweep",
    "seed",
    "label",
    "step",
    "train_loss",
    "eval_loss",
    "bpb",
    "lr",
    "grad_norm",
    "wall_time",
]
SUMMARY_COLUMNS: List[str] = [
    "sweep",
    "seed",
    "label",
    "final_eval_loss",
    "final_bpb",
    "parameters",
    "bank_parameters",
    "router_parameters",
    "loss_gain",
    "bpb_gain",
]


class LedgerStore:
    """Thread-safe SQLite store for sweep ledgers and per-run summaries."""

    def __init__(self, db_path: Optional[Path] = None) -> None:
        """
        Constructs a LedgerStore with thread-local connections.
        Args:
            db_path (Path, optional): SQLite file; defaults to MOVELAB_LEDGER_DB.
        """
        self.db_path: Path = Path(db_path or get_settings().ledger_db)
        self._local = threading.local()
        self._lock = threading.Lock()

    @property
    def conn(self) -> Connection:
        """
        Returns a thread-local database connection, creating it on first use.
        """
        if not hasattr(self._local, "connection") or self._local.connection is None:
            self._local.connection = self._create_connection()
        return self._local.connection

    def _create_connection(self) -> Connection:
        try:
            self.db_path.parent.mkdir(parents=True, exist_ok=True)
            conn = connect(str(self.db_path), check_same_thread=False)
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA synchronous=NORMAL")
            logger.info(
                f"New connection to {self.db_path} for thread "
                f"{threading.current_thread().name}"
            )
            return conn
        except Error as e:
            logger.error(f"Error creating connection: {e}")
            raise

    def __enter__(self) -> "LedgerStore":
        self.create_schema()
        return self

    def __exit__(self, exc_type: type, exc_value: Exception, traceback: any) -> None:
        self.close()
        return None

    def create_schema(self) -> None:
        """Creates the ledger and summary tables if they do not exist."""
        try:
            with self._lock:
                self.conn.executescript(SCHEMA_SQL)
                self.conn.commit()
        except Error as e:
            logger.error(f"Error creating schema: {e}")
            raise

    def delete_tables(self, table_names: List[str]) -> None:
        try:
            with self._lock:
                for table in table_names:
                    logger.info(f"Deleting table: {table}...")
                    self.conn.execute(f"DROP TABLE IF EXISTS {table};")
                self.conn.commit()
        except Error as e:
            logger.error(f"Error deleting tables: {e}")
            raise

    def __batch_insert(self, df: DataFrame, table: str, batch_size: int) -> None:
        total = len(df)
        for i in range(0, total, batch_size):
            batch = df.iloc[i : i + batch_size]
            batch.to_sql(table, self.conn, if_exists="append", index=False, method="multi")
            if (i // batch_size + 1) % 10 == 0:
                logger.info(f"Progress: {i + len(batch)}/{total} rows inserted")

    def _insert(self, df: DataFrame, table: str, columns: List[str], batch_size: int) -> int:
        missing = set(columns) - set(df.columns)
        if missing:
            raise ValueError(f"Missing columns for {table}: {sorted(missing)}")
        try:
            with self._lock:
                self.__batch_insert(df[columns].copy(), table, batch_size)
                self.conn.commit()
            logger.info(f"✓ {len(df)} rows appended to {table}")
            return len(df)
        except Exception as e:
            logger.error(f"Error inserting into {table}: {e}", exc_info=True)
            raise

    def insert_ledger(self, df: DataFrame, batch_size: int = 500) -> int:
        return self._insert(df, LEDGER_TABLE, LEDGER_COLUMNS, batch_size)

    def insert_summary(self, df: DataFrame, batch_size: int = 500) -> int:
        return self._insert(df, SUMMARY_TABLE, SUMMARY_COLUMNS, batch_size)

    def select_query(self, query: str, params: tuple = ()) -> DataFrame:
        """
        Executes a SELECT query and returns the result as a DataFrame.
        Args:
            query (str): The SELECT SQL query to execute.
            params (tuple): Positional query parameters.
        """
        try:
            return read_sql_query(query, self.conn, params=params)
        except Error as e:
            logger.error(f"Error executing query: {e}")
            raise

    def median_final_loss(self, sweep: str) -> DataFrame:
        """Median final eval loss and BPB per variant label across seeds."""
        df = self.select_query(
            f"SELECT label, seed, final_eval_loss, final_bpb FROM {SUMMARY_TABLE} "
            f"WHERE sweep = ?",
            (sweep,),
        )
        if df.empty:
            return DataFrame(columns=["label", "seeds", "median_eval_loss", "median_bpb"])
        return (
            df.groupby("label", sort=False)
            .agg(
                seeds=("seed", "nunique"),
                median_eval_loss=("final_eval_loss", "median"),
                median_bpb=("final_bpb", "median"),
            )
            .reset_index()
        )

    def close(self) -> None:
        """Closes the thread-local database connection."""
        try:
            if hasattr(self._local, "connection") and self._local.connection:
                self._local.connection.close()
                self._local.connection = None
                logger.info(
                    f"Connection closed for thread {threading.current_thread().name}"
                )
        except Error as e:
            logger.error(f"Error closing connection: {e}")
            raise
