"""Deterministic synthetic UTXO chain with planted users and planted illicit behaviour.

Every user owns a handful of addresses. At the first block each user receives
a coinbase output on every address and immediately co-spends all of them, so
the multiple-input heuristic links the whole wallet. After that users only
spend their own coins; with ``cross_user_cospend_rate`` = 0 no transaction
ever mixes two users' inputs, and clustering recovers the planted partition.

Illicit users differ from licit ones in four per-transaction channels, each
shifted by ``separation`` of its own standard deviations: log fee, fan-out
(number of payees), the logit of the share of inputs paid out, and extra
script bytes in the transaction size. They are also active in bursts rather
than uniformly over time. Fees are drawn per transaction rather than per
byte; realistic fee markets are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import Address, ClassLabel, ForensicsError, RawTransaction, TxId, TxInput, TxOutput
from .features import extract_bundle
from .ingest import DatasetBundle


class ConfigInvalid(ForensicsError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    seed: int = 0
    n_time_steps: int = 20
    blocks_per_step: int = 5
    n_users: int = 60
    mean_addresses_per_user: float = 3.0
    max_addresses_per_user: int = 12
    tx_rate: float = 0.2  # chance a user transacts in a given block
    illicit_user_fraction: float = 0.15
    labeled_fraction: float = 0.6  # share of ordinary txs whose class is known
    separation: float = 2.0  # illicit shift, in standard deviations
    fee_sigma: float = 0.35  # sd of log fee (sats)
    base_fee: float = 5000.0  # licit median fee in sats
    illicit_fee_multiplier: float | None = None  # overrides the separation-derived multiplier
    licit_fan_out: float = 2.0
    fan_out_sigma: float = 1.2
    pay_share_logit: float = -1.0  # licit mean of logit(share of inputs paid out)
    pay_share_sigma: float = 0.6
    script_overhead: float = 40.0  # licit mean of extra script bytes per transaction
    script_overhead_sigma: float = 15.0
    illicit_burst_probability: float = 0.5  # chance an illicit user is active in a given step
    illicit_burst_rate_boost: float = 2.0
    cross_user_cospend_rate: float = 0.0
    n_noise_features: int = 10
    coinbase_sats: int = 625_000_000

    def validate(self) -> "ChainConfig":
        fractions = {
            "tx_rate": self.tx_rate,
            "illicit_user_fraction": self.illicit_user_fraction,
            "labeled_fraction": self.labeled_fraction,
            "illicit_burst_probability": self.illicit_burst_probability,
            "cross_user_cospend_rate": self.cross_user_cospend_rate,
        }
        for name, v in fractions.items():
            if not 0.0 <= v <= 1.0:
                raise ConfigInvalid(f"{name}={v} is outside [0, 1]")
        if self.n_time_steps < 1 or self.blocks_per_step < 1:
            raise ConfigInvalid("need at least one time step and one block per step")
        if self.n_users < 2:
            raise ConfigInvalid("need at least two users")
        if self.mean_addresses_per_user < 1 or self.max_addresses_per_user < 1:
            raise ConfigInvalid("users need at least one address")
        if self.separation < 0 or min(self.fee_sigma, self.fan_out_sigma, self.pay_share_sigma, self.script_overhead_sigma) <= 0:
            raise ConfigInvalid("separation must be >= 0 and sigmas > 0")
        if self.n_noise_features < 0:
            raise ConfigInvalid("n_noise_features must be >= 0")
        return self


@dataclass
class SyntheticChain:
    config: ChainConfig
    transactions: list[RawTransaction]
    time_steps: dict[TxId, int]
    tx_labels: dict[TxId, ClassLabel]  # observed labels (unknown where hidden)
    tx_truth: dict[TxId, bool]  # True when sent by an illicit user
    user_of: dict[Address, int]
    illicit_users: set[int]
    noise_features: dict[TxId, list[float]] = field(default_factory=dict)

    @property
    def noise_columns(self) -> list[str]:
        return [f"LF_{i}" for i in range(1, self.config.n_noise_features + 1)]

    def planted_partition(self) -> set[frozenset]:
        groups: dict[int, set] = {}
        for a, u in self.user_of.items():
            groups.setdefault(u, set()).add(a)
        return {frozenset(g) for g in groups.values()}

    def address_truth(self) -> dict[Address, bool]:
        return {a: u in self.illicit_users for a, u in self.user_of.items()}

    def to_bundle(self) -> DatasetBundle:
        return extract_bundle(
            self.transactions,
            self.time_steps,
            self.tx_labels,
            legacy_features=self.noise_features,
            legacy_columns=self.noise_columns,
        )


def _tx_size(n_in: int, n_out: int) -> int:
    return 10 + 148 * n_in + 34 * n_out


def generate_chain(config: ChainConfig) -> SyntheticChain:
    """Generate a balanced UTXO chain from ``config``; identical configs give identical chains."""
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)

    n_illicit = int(round(cfg.illicit_user_fraction * cfg.n_users))
    illicit_users = set(int(u) for u in rng.choice(cfg.n_users, size=n_illicit, replace=False)) if n_illicit else set()
    addresses: list[list[Address]] = []
    user_of: dict[Address, int] = {}
    for u in range(cfg.n_users):
        k = 1 + int(rng.poisson(cfg.mean_addresses_per_user - 1))
        k = min(k, cfg.max_addresses_per_user)
        addrs = [f"u{u:04d}a{j:02d}" for j in range(k)]
        addresses.append(addrs)
        for a in addrs:
            user_of[a] = u

    fee_mult = cfg.illicit_fee_multiplier
    if fee_mult is None:
        fee_mult = float(np.exp(cfg.separation * cfg.fee_sigma))
    illicit_fan_out = cfg.licit_fan_out + cfg.separation * cfg.fan_out_sigma
    illicit_share_logit = cfg.pay_share_logit + cfg.separation * cfg.pay_share_sigma
    illicit_overhead = cfg.script_overhead + cfg.separation * cfg.script_overhead_sigma
    # per-step burst schedule of each illicit user
    active_steps = {
        u: rng.random(cfg.n_time_steps) < cfg.illicit_burst_probability for u in sorted(illicit_users)
    }

    utxos: list[list[tuple[Address, int, TxId]]] = [[] for _ in range(cfg.n_users)]
    txs: list[RawTransaction] = []
    steps: dict[TxId, int] = {}
    labels: dict[TxId, ClassLabel] = {}
    truth: dict[TxId, bool] = {}
    counter = 0

    def emit(tx: RawTransaction, step: int, label: ClassLabel, is_illicit: bool) -> None:
        txs.append(tx)
        steps[tx.txid] = step
        labels[tx.txid] = label
        truth[tx.txid] = is_illicit

    def next_id() -> TxId:
        nonlocal counter
        counter += 1
        return f"tx{counter:07d}"

    # funding: one coinbase per user, then a co-spend of every funded address
    block = 0
    for u in range(cfg.n_users):
        txid = next_id()
        share = cfg.coinbase_sats // len(addresses[u])
        outs = tuple(TxOutput(a, share) for a in addresses[u])
        emit(RawTransaction(txid, block, (), outs, 0, _tx_size(0, len(outs))), 1, ClassLabel.UNKNOWN, u in illicit_users)
        if len(addresses[u]) > 1:
            ins = tuple(TxInput(a, share, txid) for a in addresses[u])
            size = _tx_size(len(ins), len(ins))
            fee = min(int(cfg.base_fee), share * len(ins) // 2)
            total = share * len(ins) - fee
            part = total // len(ins)
            amounts = [part] * (len(ins) - 1) + [total - part * (len(ins) - 1)]
            cid = next_id()
            outs2 = tuple(TxOutput(a, s) for a, s in zip(addresses[u], amounts))
            emit(RawTransaction(cid, block, ins, outs2, fee, size), 1, ClassLabel.UNKNOWN, u in illicit_users)
            utxos[u] = [(a, s, cid) for a, s in zip(addresses[u], amounts)]
        else:
            utxos[u] = [(addresses[u][0], share, txid)]

    n_blocks = cfg.n_time_steps * cfg.blocks_per_step
    for block in range(1, n_blocks + 1):
        step = min(cfg.n_time_steps, (block - 1) // cfg.blocks_per_step + 1)
        draws = rng.random(cfg.n_users)
        for u in range(cfg.n_users):
            illicit = u in illicit_users
            rate = cfg.tx_rate
            if illicit:
                if not active_steps[u][step - 1]:
                    continue
                rate = min(1.0, rate * cfg.illicit_burst_rate_boost)
            if draws[u] >= rate or not utxos[u]:
                continue
            coins = utxos[u]
            n_in = int(min(len(coins), 1 + rng.poisson(0.6)))
            picks = sorted(rng.choice(len(coins), size=n_in, replace=False).tolist())
            spent = [coins[i] for i in picks]
            picked = set(picks)
            utxos[u] = [c for i, c in enumerate(coins) if i not in picked]
            ins = [TxInput(a, s, src) for a, s, src in spent]
            if cfg.cross_user_cospend_rate and rng.random() < cfg.cross_user_cospend_rate:
                other = int(rng.integers(cfg.n_users))
                if other != u and utxos[other]:
                    a, s, src = utxos[other].pop(0)
                    ins.append(TxInput(a, s, src))
            available = sum(i.sats for i in ins)

            mu = illicit_fan_out if illicit else cfg.licit_fan_out
            n_pay = int(np.clip(np.rint(rng.normal(mu, cfg.fan_out_sigma)), 1, 20))
            log_fee = np.log(cfg.base_fee) + rng.normal(0.0, cfg.fee_sigma)
            fee = int(np.exp(log_fee) * (fee_mult if illicit else 1.0))
            overhead = rng.normal(illicit_overhead if illicit else cfg.script_overhead, cfg.script_overhead_sigma)
            size = _tx_size(len(ins), n_pay + 1) + max(0, int(round(overhead)))
            if fee >= available:
                # cannot afford: put the coins back untouched
                utxos[u] = sorted(utxos[u] + spent, key=lambda c: (c[2], c[0]))
                continue
            budget = available - fee
            logit = rng.normal(illicit_share_logit if illicit else cfg.pay_share_logit, cfg.pay_share_sigma)
            pay_total = int(budget * float(expit(logit)))
            recipients = []
            for _ in range(n_pay):
                v = int(rng.integers(cfg.n_users - 1))
                v = v if v < u else v + 1
                recipients.append((v, addresses[v][int(rng.integers(len(addresses[v])))]))
            weights = rng.dirichlet(np.ones(n_pay))
            amounts = [int(pay_total * w) for w in weights]
            change = budget - sum(amounts)
            change_addr = addresses[u][int(rng.integers(len(addresses[u])))]
            outs = [TxOutput(addr, amt) for (_, addr), amt in zip(recipients, amounts)] + [TxOutput(change_addr, change)]
            txid = next_id()
            tx = RawTransaction(txid, block, tuple(ins), tuple(outs), fee, size)
            if rng.random() < cfg.labeled_fraction:
                label = ClassLabel.ILLICIT if illicit else ClassLabel.LICIT
            else:
                label = ClassLabel.UNKNOWN
            emit(tx, step, label, illicit)
            for (v, addr), amt in zip(recipients, amounts):
                utxos[v].append((addr, amt, txid))
            utxos[u].append((change_addr, change, txid))

    noise = {}
    if cfg.n_noise_features:
        values = rng.normal(size=(len(txs), cfg.n_noise_features))
        noise = {tx.txid: [round(float(x), 6) for x in row] for tx, row in zip(txs, values)}
    return SyntheticChain(cfg, txs, steps, labels, truth, user_of, illicit_users, noise)
