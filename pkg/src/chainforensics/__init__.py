"""Bitcoin transaction forensics: dataset I/O, feature extraction, graph views,
address clustering, and illicit-activity classifiers."""

__version__ = "0.1.0"

from .core import ClassLabel, FiveStats, RawTransaction, five_stats, label_from_code  # noqa: E402
from .ingest import DatasetBundle, load_bundle, parse_raw_transactions, write_bundle  # noqa: E402

__all__ = [
    "ClassLabel",
    "DatasetBundle",
    "FiveStats",
    "RawTransaction",
    "five_stats",
    "label_from_code",
    "load_bundle",
    "parse_raw_transactions",
    "write_bundle",
]
