from logging import Logger, getLogger, basicConfig, INFO
from pandas.errors import ParserError
from typing import Dict, List, Optional, Tuple
from io import StringIO
from dotenv import dotenv_values
from pathlib import Path
from sys import path
from pandas import DataFrame, read_csv

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.config.settings import DEFAULT_ENCODING, PATH_ROOT, get_settings

CONFIG_SUFFIX: str = ".cfg"
SENTENCE_SUFFIX: str = ".tsv"
KNOWN_PREFIXES: Tuple[str, ...] = ("MODEL_", "TRAIN_", "DATA_", "SWEEP_", "TRACE_", "RUN_")
TOP_LEVEL_KEYS: Tuple[str, ...] = ("TOOL_VERSION",)
CONTEXTS: Tuple[str, ...] = ("short", "medium", "long")
ROLES: Tuple[str, ...] = ("A1", "A2", "B1")
SENTENCE_COLUMNS: List[str] = ["context", "role", "text"]


class ResourceNotFoundError(Exception):
    """
    Exception raised when a requested resource is not found.
    """

    pass


class ConfigFormatError(ValueError):
    """
    Exception raised when a config or sentence file is malformed.
    """

    pass


def _resolve(directory: Optional[Path], fallback: Path) -> Path:
    base = Path(directory) if directory is not None else fallback
    return base if base.is_absolute() else PATH_ROOT / base


class RunConfigLoader:
    """
    Load and cache KEY=VALUE run configs.
    """

    def __init__(self, configs_dir: Optional[Path] = None) -> None:
        """
        Initialize the config loader.
        Args:
            configs_dir: Directory of ``*.cfg`` files; relative paths are taken from
                the repository root. Defaults to MOVELAB_CONFIGS_DIR.
        """
        self.configs_dir: Path = _resolve(configs_dir, get_settings().configs_dir)
        self._cache: Dict[str, Dict[str, str]] = {}

    def _locate(self, name: str) -> Path:
        candidate = Path(name)
        if candidate.is_absolute() or candidate.exists():
            return candidate
        if not candidate.suffix:
            candidate = candidate.with_suffix(CONFIG_SUFFIX)
        return self.configs_dir / candidate

    def load(self, name: str, use_cache: bool = True) -> Dict[str, str]:
        """
        Load a run config.
        Args:
            name: File path, or a name inside the configs directory.
            use_cache: If True, use cache. If False, force reload.
        Returns:
            Mapping of upper-case keys to raw string values.
        Raises:
            ResourceNotFoundError: If the file is not found.
            ConfigFormatError: On unknown keys or empty values.
        """
        if use_cache and name in self._cache:
            logger.debug(f"Config '{name}' loaded from cache")
            return dict(self._cache[name])

        filepath = self._locate(name)
        if not filepath.exists():
            raise ResourceNotFoundError(f"Config file not found: {filepath}")

        try:
            logger.info(f"Loading config: {filepath}")
            raw = dotenv_values(filepath, encoding=DEFAULT_ENCODING)
        except Exception as e:
            logger.error(f"Error loading config '{filepath}': {e}")
            raise

        values: Dict[str, str] = {}
        for key, value in raw.items():
            if not key.startswith(KNOWN_PREFIXES) and key not in TOP_LEVEL_KEYS:
                raise ConfigFormatError(f"{filepath}: unknown key '{key}'")
            if value is None or value == "":
                raise ConfigFormatError(f"{filepath}: key '{key}' has no value")
            values[key] = value
        self._cache[name] = values
        return dict(values)

    def reload(self, name: Optional[str] = None) -> None:
        """
        Drop cached configs.
        Args:
            name: Specific config to forget, or None for all.
        """
        if name:
            if self._cache.pop(name, None) is not None:
                logger.info(f"Config reloaded: {name}")
            else:
                logger.warning(f"Config was not in cache: {name}")
        else:
            count = len(self._cache)
            self._cache.clear()
            logger.info(f"Config cache cleared ({count} configs removed)")

    def list_configs(self) -> List[str]:
        if not self.configs_dir.exists():
            return []
        return sorted(f.name for f in self.configs_dir.glob(f"*{CONFIG_SUFFIX}"))

    def exists(self, name: str) -> bool:
        return self._locate(name).exists()

    @property
    def cache_size(self) -> int:
        """Returns the number of configs in cache."""
        return len(self._cache)


def section(values: Dict[str, str], prefix: str) -> Dict[str, str]:
    """Keys under ``prefix`` with the prefix stripped and lower-cased."""
    return {k[len(prefix) :].lower(): v for k, v in values.items() if k.startswith(prefix)}


def write_key_values(target: Path, values: Dict[str, object]) -> Path:
    """Writes sorted KEY=VALUE lines (None values skipped) that ``RunConfigLoader`` can read back."""
    lines = [f"{key}={value}" for key, value in sorted(values.items()) if value is not None]
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("\n".join(lines) + "\n", encoding=DEFAULT_ENCODING)
    logger.info(f"Wrote {len(lines)} keys to {target}")
    return target


def load_sentences(source: Path) -> Dict[Tuple[str, str], str]:
    """
    Reads a ``context<TAB>role<TAB>text`` file.
    Returns:
        Mapping (context, role) -> sentence.
    Raises:
        ResourceNotFoundError: If the file does not exist.
        ConfigFormatError: On unknown contexts/roles, duplicates or any missing
            role, naming what is missing.
    """
    source = Path(source)
    if not source.exists():
        raise ResourceNotFoundError(f"Sentence file not found: {source}")
    numbered = [
        (number, line)
        for number, line in enumerate(
            source.read_text(encoding=DEFAULT_ENCODING).splitlines(), start=1
        )
        if line.strip() and not line.startswith("#")
    ]
    if not numbered:
        rows = DataFrame(columns=SENTENCE_COLUMNS)
    else:
        try:
            frame = read_csv(
                StringIO("\n".join(line for _, line in numbered)),
                sep="\t",
                header=None,
                dtype=str,
                keep_default_na=False,
            )
        except ParserError as e:
            raise ConfigFormatError(
                f"{source}: expected 3 tab-separated fields on every line"
            ) from e
        if frame.shape[1] != len(SENTENCE_COLUMNS):
            raise ConfigFormatError(
                f"{source}:{numbered[0][0]}: expected 3 tab-separated fields"
            )
        rows = frame.fillna("").set_axis(SENTENCE_COLUMNS, axis=1)
        rows.index = [number for number, _ in numbered]

    short = rows[(rows["role"] == "") | (rows["text"] == "")]
    if len(short):
        raise ConfigFormatError(f"{source}:{short.index[0]}: expected 3 tab-separated fields")
    rows = rows.assign(
        context=rows["context"].str.strip().str.lower(), role=rows["role"].str.strip()
    )
    unknown = rows[~rows["context"].isin(CONTEXTS) | ~rows["role"].isin(ROLES)]
    if len(unknown):
        row = unknown.iloc[0]
        raise ConfigFormatError(
            f"{source}:{unknown.index[0]}: unknown context/role "
            f"'{row['context']}'/'{row['role']}'"
        )
    repeated = rows[rows.duplicated(subset=["context", "role"])]
    if len(repeated):
        row = repeated.iloc[0]
        raise ConfigFormatError(
            f"{source}:{repeated.index[0]}: duplicate {row['context']}/{row['role']}"
        )

    present = set(zip(rows["context"], rows["role"]))
    missing_roles = sorted({r for c in CONTEXTS for r in ROLES if (c, r) not in present})
    if missing_roles:
        missing = [f"{c}/{r}" for c in CONTEXTS for r in ROLES if (c, r) not in present]
        raise ConfigFormatError(
            f"{source}: missing sentence roles {', '.join(missing_roles)} "
            f"({', '.join(missing)})"
        )
    sentences = {
        (context, role): text
        for context, role, text in rows.itertuples(index=False, name=None)
    }
    logger.info(f"Loaded {len(sentences)} trace sentences from {source}")
    return sentences
