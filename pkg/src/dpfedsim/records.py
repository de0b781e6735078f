"""Per-round metric rows and the fixed CSV schemas the CLI writes and reads."""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

ROUNDS_SCHEMA = "rounds/1"


@dataclass(frozen=True)
class RoundRecord:
    round: int
    epsilon: float
    sigma: float
    gamma: float
    sensitivity: float
    train_loss: float
    test_loss: float
    test_accuracy: float
    attacker_loss: float
    delta_spent: float
    noise_kl: float
    reward: float | None = None
    detection: str = ""


ROUNDS_HEADER = tuple(f.name for f in fields(RoundRecord))
SWEEP_HEADER = (
    "seed", "epsilon", "gamma", "kind", "rounds_completed", "final_test_loss",
    "final_test_accuracy", "delta_spent", "stop_reason", "status",
)
REWARDS_HEADER = ("episode", "explore_prob", "accumulated_reward")
DETECT_HEADER = (
    "condition", "run", "seed", "round", "epsilon", "state_m_bin", "state_f_bin", "state_eps_idx",
    "baseline", "observed_loss", "verdict",
)
KNOWN_HEADERS = {
    "rounds": ROUNDS_HEADER,
    "sweep": SWEEP_HEADER,
    "rewards": REWARDS_HEADER,
    "detect": DETECT_HEADER,
}


def fmt(value) -> str:
    """Lossless text for a CSV cell (floats via repr, None as empty)."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_rounds(path, records: Iterable[RoundRecord]) -> None:
    write_atomic(path, render_csv(ROUNDS_HEADER, (astuple(r) for r in records)))


class SchemaError(ValueError):
    pass


def read_table(path) -> tuple[str, list[dict[str, str]]]:
    """Read a CSV written by the CLI; returns (schema kind, rows).

    Files whose header matches none of the known schemas are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        kind = next((k for k, h in KNOWN_HEADERS.items() if h == header), None)
        if kind is None:
            raise SchemaError(f"{path}: unknown header {','.join(header)}")
        rows = [dict(zip(header, row)) for row in reader]
    return kind, rows


def parse_float(text: str) -> float:
    return float(text) if text != "" else float("nan")


def read_rounds(path) -> list[RoundRecord]:
    kind, rows = read_table(path)
    if kind != "rounds":
        raise SchemaError(f"{path}: expected a rounds file, found {kind}")
    out = []
    for r in rows:
        out.append(RoundRecord(
            round=int(r["round"]),
            **{k: parse_float(r[k]) for k in ROUNDS_HEADER[1:-2]},
            reward=None if r["reward"] == "" else float(r["reward"]),
            detection=r["detection"],
        ))
    return out
