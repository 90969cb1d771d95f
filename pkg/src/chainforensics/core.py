"""Shared domain types: class labels, satoshi amounts, raw transactions, five-number summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_EVEN
from enum import IntEnum
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence, Union

SATS_PER_BTC = 100_000_000

TxId = str
Address = str
TimeStep = int


class ForensicsError(Exception):
    """Base class for every error raised by this package."""


class EmptySample(ForensicsError):
    pass


class UnknownClassCode(ForensicsError):
    pass


class InvalidTransaction(ForensicsError):
    pass


class ClassLabel(IntEnum):
    ILLICIT = 1
    LICIT = 2
    UNKNOWN = 3


def label_from_code(code: int) -> ClassLabel:
    """Map a serialized class code (1/2/3) to its label."""
    try:
        return ClassLabel(int(code))
    except (ValueError, TypeError):
        raise UnknownClassCode(f"class code {code!r} is not one of 1, 2, 3") from None


def code_of(label: ClassLabel) -> int:
    return int(label)


# --- amounts -----------------------------------------------------------------
# Amounts are carried as integer satoshis everywhere; BTC floats only appear at
# the feature-row boundary.

def btc_to_sats(value: Union[str, int, Decimal]) -> int:
    """Parse a BTC decimal (string or Decimal) into exact satoshis."""
    d = Decimal(str(value)) * SATS_PER_BTC
    if d != d.to_integral_value():
        raise ValueError(f"{value!r} has more than 8 fractional digits")
    return int(d)


def sats_to_btc(sats: Union[int, float]) -> float:
    return sats / SATS_PER_BTC


def format_btc(sats: int) -> str:
    """Exact 8-decimal text for an integer satoshi amount."""
    sign = "-" if sats < 0 else ""
    q, r = divmod(abs(int(sats)), SATS_PER_BTC)
    return f"{sign}{q}.{r:08d}"


def format_decimal(value: float, places: int = 8) -> str:
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_EVEN))


# --- five-number summaries ------------------------------------------------------

class FiveStats(NamedTuple):
    total: float
    min: float
    max: float
    mean: float
    median: float


ZERO_STATS = FiveStats(0, 0, 0, 0.0, 0.0)


def five_stats(values: Iterable[Union[int, float]]) -> FiveStats:
    """total, min, max, mean and median of a non-empty sample.

    Integer samples (satoshis, block gaps) keep an exact integer total; mean and
    median are computed from exact rationals and rounded once.
    """
    vals = sorted(values)
    n = len(vals)
    if n == 0:
        raise EmptySample("five_stats needs at least one value")
    if all(isinstance(v, int) for v in vals):
        total = sum(vals)
        mean = float(Fraction(total, n))
        mid = n // 2
        median = float(vals[mid]) if n % 2 else float(Fraction(vals[mid - 1] + vals[mid], 2))
        return FiveStats(total, vals[0], vals[-1], mean, median)
    total = math.fsum(vals)
    mean = total / n
    mid = n // 2
    median = vals[mid] if n % 2 else (vals[mid - 1] + vals[mid]) / 2
    # fsum/n can drift an ulp outside [min, max] for near-constant samples
    mean = min(max(mean, vals[0]), vals[-1])
    return FiveStats(total, vals[0], vals[-1], mean, median)


def five_stats_or_zero(values: Sequence[Union[int, float]]) -> FiveStats:
    """Like five_stats, but an empty series summarizes to all zeros."""
    return five_stats(values) if len(values) else ZERO_STATS


# --- raw transactions -------------------------------------------------------------

@dataclass(frozen=True)
class TxInput:
    address: Address
    sats: int
    spent_txid: TxId | None = None


@dataclass(frozen=True)
class TxOutput:
    address: Address
    sats: int


@dataclass(frozen=True)
class RawTransaction:
    """One UTXO transaction. Coinbase transactions have no inputs and no fee constraint."""

    txid: TxId
    block_height: int
    inputs: tuple[TxInput, ...]
    outputs: tuple[TxOutput, ...]
    fee: int
    size_bytes: int

    def __post_init__(self):
        if not self.txid:
            raise InvalidTransaction("empty txid")
        if self.block_height < 0:
            raise InvalidTransaction(f"{self.txid}: negative block height")
        if self.size_bytes <= 0:
            raise InvalidTransaction(f"{self.txid}: size_bytes must be positive")
        if self.fee < 0 or any(i.sats < 0 for i in self.inputs) or any(o.sats < 0 for o in self.outputs):
            raise InvalidTransaction(f"{self.txid}: negative amount")
        if any(not i.address for i in self.inputs) or any(not o.address for o in self.outputs):
            raise InvalidTransaction(f"{self.txid}: empty address")
        if self.inputs and self.input_total != self.output_total + self.fee:
            raise InvalidTransaction(
                f"{self.txid}: inputs {self.input_total} != outputs {self.output_total} + fee {self.fee}"
            )

    @property
    def is_coinbase(self) -> bool:
        return not self.inputs

    @property
    def input_total(self) -> int:
        return sum(i.sats for i in self.inputs)

    @property
    def output_total(self) -> int:
        return sum(o.sats for o in self.outputs)

    @property
    def input_addresses(self) -> list[Address]:
        return [i.address for i in self.inputs]

    @property
    def output_addresses(self) -> list[Address]:
        return [o.address for o in self.outputs]


def make_transaction(
    txid: TxId,
    block_height: int,
    inputs: Sequence[tuple],
    outputs: Sequence[tuple],
    fee: int,
    size_bytes: int,
) -> RawTransaction:
    """Convenience constructor from plain (address, sats[, spent_txid]) tuples."""
    return RawTransaction(
        txid=str(txid),
        block_height=int(block_height),
        inputs=tuple(TxInput(str(i[0]), int(i[1]), str(i[2]) if len(i) > 2 and i[2] is not None else None) for i in inputs),
        outputs=tuple(TxOutput(str(o[0]), int(o[1])) for o in outputs),
        fee=int(fee),
        size_bytes=int(size_bytes),
    )
