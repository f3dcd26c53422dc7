"""Text file formats: domains, scheme tables, estimates, OD tables, scenarios, input CSVs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import LocationDomain, snap_to_domain
from .geo import EncodedLocation, EncodingError, GeoPoint, encode, strip_common_prefix
from .mechanism import SchemeTable, table_from_betas
from .navigation import Crowd, Incident, Scenario, TrajectoryRecord, TravelModel

TABLE_FORMAT = "staircase-table"
TABLE_VERSION = 1


class FormatError(ValueError):
    pass


# --- domains ----------------------------------------------------------------------------


def domain_text(domain: LocationDomain) -> str:
    total = domain.prefix.nbits + domain.nbits
    lines = [f"level={total // 2}" if total % 2 == 0 else f"bits={domain.nbits}"]
    if domain.prefix.nbits:
        lines.append(f"prefix={domain.prefix.bits}")
    lines += [c.hex() for c in domain.locations]
    return "\n".join(lines) + "\n"


def write_domain(domain: LocationDomain, path) -> None:
    Path(path).write_text(domain_text(domain))


def read_domain(path) -> LocationDomain:
    """``level=<h>`` (or ``bits=<n>``), optional ``prefix=<bits>``, then one hex code per line."""
    return parse_domain(Path(path).read_text().splitlines(), str(path))


def parse_domain(lines, source: str = "<domain>") -> LocationDomain:
    lines = [ln.strip() for ln in lines]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise FormatError(f"{source}: empty domain file")
    key, _, val = lines[0].partition("=")
    prefix = EncodedLocation(0, 0)
    body = lines[1:]
    if body and body[0].startswith("prefix="):
        prefix = EncodedLocation.from_bits(body[0][len("prefix=") :])
        body = body[1:]
    try:
        if key == "level":
            nbits = 2 * int(val) - prefix.nbits
        elif key == "bits":
            nbits = int(val)
        else:
            raise FormatError(f"{source}: first line must be level=<h> or bits=<n>")
        codes = [EncodedLocation.from_hex(h, nbits) for h in body]
    except (ValueError, EncodingError) as exc:
        raise FormatError(f"{source}: {exc}") from None
    return LocationDomain(codes, prefix=prefix)


def domain_from_points(points: list[GeoPoint], level: int = 23, align: int = 2) -> LocationDomain:
    codes = sorted(set(encode(p, level) for p in points))
    if len(codes) == 1:
        raise FormatError("need at least two distinct cells")
    shared, short = strip_common_prefix(codes, align=align)
    return LocationDomain(short, prefix=codes[0].prefix(shared))


def read_points_csv(path) -> list[GeoPoint]:
    """``lat,lon`` rows or trajectory rows ``user,seq,lat,lon,timestamp``; a header row is skipped."""
    pts = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            row = [c.strip() for c in row]
            if not row or not any(row) or row[0].startswith("#"):
                continue
            if lineno == 1 and not _numeric(row[-1 if len(row) == 2 else 2]):
                continue
            try:
                if len(row) == 2:
                    lat, lon = float(row[0]), float(row[1])
                elif len(row) == 5:
                    lat, lon = float(row[2]), float(row[3])
                    float(row[4])
                else:
                    raise ValueError(f"expected 2 or 5 fields, got {len(row)}")
                pts.append(GeoPoint(lat, lon))
            except (ValueError, EncodingError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return pts


def _numeric(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# --- scheme tables -------------------------------------------------------------------------


def table_dict(table: SchemeTable) -> dict:
    return {
        "format": TABLE_FORMAT,
        "version": TABLE_VERSION,
        "domain_hash": table.domain.hash,
        "epsilon_target": table.epsilon_target,
        "c": table.c,
        "m": table.m,
        "betas": table.betas.tolist(),
        "alphas": table.alphas.tolist(),
    }


def write_table(table: SchemeTable, path) -> None:
    Path(path).write_text(json.dumps(table_dict(table), separators=(",", ":")) + "\n")


def read_table(path, domain: LocationDomain) -> SchemeTable:
    """Load a table and rebuild it against ``domain``; any mismatch is refused."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if raw.get("format") != TABLE_FORMAT or raw.get("version") != TABLE_VERSION:
        raise FormatError(f"{path}: not a version-{TABLE_VERSION} scheme table")
    if raw["domain_hash"] != domain.hash:
        raise FormatError(f"{path}: table was built for a different domain")
    table = table_from_betas(domain, np.array(raw["betas"], dtype=np.int64), raw["c"], raw["epsilon_target"])
    if table.m != raw["m"] or not np.allclose(table.alphas, np.array(raw["alphas"]), rtol=0, atol=1e-12):
        raise FormatError(f"{path}: stored probabilities do not match the thresholds")
    return table


# --- estimates and OD tables ------------------------------------------------------------------


def estimate_text(domain: LocationDomain, p_hat, n: int, epsilon: float, residual: float) -> str:
    lines = [f"# n={n} epsilon={epsilon:g} residual={residual:.6g}"]
    lines += [f"{domain.full_code(i).hex()},{v:.12g}" for i, v in enumerate(np.asarray(p_hat))]
    return "\n".join(lines) + "\n"


def od_text(domain: LocationDomain, pair_table: np.ndarray) -> str:
    a, b = np.nonzero(pair_table)
    vals = pair_table[a, b]
    order = np.lexsort((b, a, -vals))
    return "".join(
        f"{domain.full_code(int(a[k])).hex()},{domain.full_code(int(b[k])).hex()},{vals[k]:.12g}\n" for k in order
    )


# --- navigation scenarios ---------------------------------------------------------------------


def scenario_text(sc) -> str:
    dom = sc.domain
    hx = lambda i: dom.full_code(i).hex()  # noqa: E731
    out = [
        f"theta={sc.theta:g}",
        f"epsilon={sc.epsilon:g}",
        f"epoch={sc.epoch_seconds}",
        f"seed={sc.seed}",
        f"background={sc.crowd.background}",
        f"congestion_users={sc.travel.congestion_users}",
        f"delay={sc.travel.delay:g}",
        "[domain]",
        domain_text(dom).rstrip("\n"),
        "[segments]",
    ]
    out += [f"{hx(a)},{hx(b)},{s:g}" for (a, b), s in sorted(sc.travel.segments.items())]
    out.append("[incidents]")
    out += [f"{hx(i.cell)},{i.epoch_from},{i.epoch_to},{i.users}" for i in sc.crowd.incidents]
    out.append("[trajectories]")
    for tr in sc.trajectories:
        out += [f"{tr.user},{k},{hx(c)},{t:.3f}" for k, (c, t) in enumerate(tr.waypoints)]
    return "\n".join(out) + "\n"


def read_scenario(path):
    header: dict[str, str] = {}
    sections: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            k, _, v = line.partition("=")
            header[k.strip()] = v.strip()
        else:
            sections[current].append((lineno, line))
    dom = parse_domain([l for _, l in sections.get("domain", [])], f"{path} [domain]")
    full = {dom.full_code(i).hex(): i for i in range(dom.d)}
    total = dom.prefix.nbits + dom.nbits
    snapped = 0

    def cell(h: str, lineno: int, snap_ok: bool = False) -> int:
        nonlocal snapped
        if h in full:
            return full[h]
        if not snap_ok:
            raise FormatError(f"{path}:{lineno}: {h} is not in the domain")
        try:
            code = EncodedLocation.from_hex(h, total)
        except EncodingError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        snapped += 1
        return snap_to_domain(dom, code)

    segs = {}
    for lineno, line in sections.get("segments", []):
        a, b, s = line.split(",")
        segs[(cell(a, lineno), cell(b, lineno))] = float(s)
    incidents = []
    for lineno, line in sections.get("incidents", []):
        h, e0, e1, u = line.split(",")
        incidents.append(Incident(cell(h, lineno), int(e0), int(e1), int(u)))
    per_user: dict[str, list] = {}
    for lineno, line in sections.get("trajectories", []):
        user, seq, h, t = line.split(",")
        per_user.setdefault(user, []).append((int(seq), cell(h, lineno, True), float(t)))
    trajs = [TrajectoryRecord(u, [(c, t) for _, c, t in sorted(w)]) for u, w in per_user.items()]
    travel = TravelModel(dom.d, segs, int(header.get("congestion_users", 50)), float(header.get("delay", 3)))
    seed = int(header.get("seed", 0))
    crowd = Crowd(dom.d, int(header.get("background", 0)), incidents, seed)
    sc = Scenario(
        dom, travel, crowd, trajs, float(header.get("theta", 40)), float(header.get("epsilon", 1)),
        int(header.get("epoch", 300)), seed,
    )
    sc.snapped = snapped
    return sc


@dataclass
class RunManifest:
    command: str
    args: dict
    versions: dict
    hashes: dict
    extra: dict = field(default_factory=dict)

    def text(self) -> str:
        return json.dumps(
            {"command": self.command, "args": self.args, "versions": self.versions, "hashes": self.hashes, **self.extra},
            indent=2,
            sort_keys=True,
            default=_jsonable,
        ) + "\n"


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v) if math.isfinite(v) else str(v)
    if isinstance(v, Path):
        return str(v)
    return str(v)
