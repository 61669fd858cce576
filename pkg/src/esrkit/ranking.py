"""Three-track leaderboard scoring with competition ranks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "COLUMNS",
    "METRICS",
    "PSNR_VAL_MIN",
    "PSNR_TEST_MIN",
    "TRACKS",
    "SubmissionRecord",
    "RankEntry",
    "RankingTable",
    "CsvFormatError",
    "eligible",
    "competition_rank",
    "rank_tracks",
    "load_csv",
    "parse_csv",
    "dump_csv",
    "render",
    "fixture_path",
]

COLUMNS = ("team", "psnr_val", "psnr_test", "runtime_ms", "params_m", "flops_g", "acts_m", "mem_m")
METRICS = ("runtime_ms", "params_m", "flops_g", "acts_m", "mem_m")
PSNR_VAL_MIN = 28.95
PSNR_TEST_MIN = 28.65
TRACKS = ("main", "complexity", "overall")


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SubmissionRecord:
    team: str
    psnr_val: float
    psnr_test: float
    runtime_ms: float
    params_m: float
    flops_g: float
    acts_m: float
    mem_m: float

    def __post_init__(self):
        if not (math.isfinite(self.psnr_val) and math.isfinite(self.psnr_test)):
            raise ValueError(f"{self.team}: PSNR values must be finite")
        for m in METRICS:
            v = getattr(self, m)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{self.team}: {m} must be a positive number, got {v}")


@dataclass(frozen=True)
class RankEntry:
    team: str
    eligible: bool
    ranks: dict = field(default_factory=dict)  # metric -> rank, empty when ineligible
    main: int | None = None
    sub1: int | None = None
    sub2: int | None = None
    place_main: int | None = None
    place_sub1: int | None = None
    place_sub2: int | None = None


@dataclass(frozen=True)
class RankingTable:
    entries: tuple[RankEntry, ...]

    def __getitem__(self, team: str) -> RankEntry:
        for e in self.entries:
            if e.team == team:
                return e
        raise KeyError(team)

    def ranked(self) -> list[RankEntry]:
        return [e for e in self.entries if e.eligible]

    def standings(self, track: str) -> list[RankEntry]:
        """Eligible entries sorted by placement on ``track`` (stable on input order)."""
        key = _PLACE[track]
        return sorted(self.ranked(), key=lambda e: getattr(e, key))


_PLACE = {"main": "place_main", "complexity": "place_sub1", "overall": "place_sub2"}
_SCORE = {"main": "main", "complexity": "sub1", "overall": "sub2"}


def eligible(rec: SubmissionRecord) -> bool:
    return rec.psnr_val >= PSNR_VAL_MIN and rec.psnr_test >= PSNR_TEST_MIN


def competition_rank(values) -> list[int]:
    """Ascending ranks where ties share the lowest rank and the next rank skips."""
    return [int(r) for r in rankdata(np.asarray(values, dtype=np.float64), method="min")]


def rank_tracks(records) -> RankingTable:
    records = list(records)
    ok = [r for r in records if eligible(r)]
    if not ok:
        raise ValueError("no record passes the PSNR eligibility gates")
    ranks = {m: competition_rank([getattr(r, m) for r in ok]) for m in METRICS}
    main = ranks["runtime_ms"]
    sub1 = [p + f for p, f in zip(ranks["params_m"], ranks["flops_g"])]
    sub2 = [sum(ranks[m][i] for m in METRICS) for i in range(len(ok))]
    places = {"main": competition_rank(main), "sub1": competition_rank(sub1), "sub2": competition_rank(sub2)}
    scored = {}
    for i, r in enumerate(ok):
        scored[id(r)] = RankEntry(
            r.team,
            True,
            {m: ranks[m][i] for m in METRICS},
            main[i],
            sub1[i],
            sub2[i],
            places["main"][i],
            places["sub1"][i],
            places["sub2"][i],
        )
    return RankingTable(tuple(scored.get(id(r), RankEntry(r.team, False)) for r in records))


def parse_csv(text: str, source: str = "<csv>") -> list[SubmissionRecord]:
    """Strict parse: exact column set, every cell present and numeric."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvFormatError(f"{source}: empty file, expected header {','.join(COLUMNS)}") from None
    header = [h.strip() for h in header]
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise CsvFormatError(f"{source}: line 1: missing column(s) {', '.join(missing)}")
    extra = [c for c in header if c not in COLUMNS]
    if extra or len(header) != len(COLUMNS):
        raise CsvFormatError(f"{source}: line 1: unexpected or duplicate column(s) {', '.join(extra) or header}")
    pos = {c: header.index(c) for c in COLUMNS}
    out = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(COLUMNS):
            raise CsvFormatError(f"{source}: line {line}: expected {len(COLUMNS)} cells, got {len(row)}")
        vals = {}
        for c in COLUMNS[1:]:
            cell = row[pos[c]].strip()
            try:
                vals[c] = float(cell)
            except ValueError:
                raise CsvFormatError(f"{source}: line {line}, column {c!r}: not a number: {cell!r}") from None
        team = row[pos["team"]].strip()
        if not team:
            raise CsvFormatError(f"{source}: line {line}, column 'team': empty team name")
        try:
            out.append(SubmissionRecord(team, **vals))
        except ValueError as exc:
            raise CsvFormatError(f"{source}: line {line}: {exc}") from None
    return out


def load_csv(path) -> list[SubmissionRecord]:
    p = Path(path)
    return parse_csv(p.read_text(), str(p))


def dump_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow([r.team] + [repr(getattr(r, c)) for c in COLUMNS[1:]])
    return buf.getvalue()


def render(table: RankingTable, track: str | None = None) -> str:
    """Plain-text table; ``track`` sorts ranked teams by that track's placement."""
    if track is not None and track not in TRACKS:
        raise ValueError(f"track must be one of {TRACKS}")
    rows = table.standings(track) if track else list(table.entries)
    head = ["team", "main", "sub1", "sub2"] + [f"r_{m.split('_')[0]}" for m in METRICS]
    if track:
        head.insert(1, "place")
    lines = []
    for e in rows:
        if not e.eligible:
            cells = [e.team, "-", "-", "-"] + ["-"] * len(METRICS)
        else:
            cells = [e.team, f"{e.main}({e.place_main})", f"{e.sub1}({e.place_sub1})", f"{e.sub2}({e.place_sub2})"]
            cells += [str(e.ranks[m]) for m in METRICS]
        if track:
            cells.insert(1, str(getattr(e, _PLACE[track])) if e.eligible else "-")
        lines.append(cells)
    widths = [max(len(r[i]) for r in [head] + lines) for i in range(len(head))]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in lines])


def fixture_path():
    """Path to the bundled leaderboard CSV (43 valid submissions)."""
    return resources.files("esrkit") / "data" / "leaderboard.csv"
