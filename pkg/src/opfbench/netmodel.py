"""MATPOWER-subset case files, per-unit network model, bus admittance matrix.

The accepted grammar is the MATPOWER subset documented in the README:
an optional ``function mpc = <name>`` header, scalar and matrix
assignments to ``mpc.<field>``, ``%`` comments.  Required fields are
baseMVA, bus, gen, branch and gencost; unknown fields are ignored.
Demands, shunts and generator limits are converted to per-unit on the
system base at parse time.  Cost coefficients stay on the MW scale used
by MATPOWER gencost data.
"""

from __future__ import annotations

import cmath
import math
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

SLACK = "slack"
GENERATOR_BUS = "generator-bus"
LOAD_BUS = "load-bus"

_BUS_KIND_FROM_CODE = {1: LOAD_BUS, 2: GENERATOR_BUS, 3: SLACK}
_BUS_CODE_FROM_KIND = {LOAD_BUS: 1, GENERATOR_BUS: 2, SLACK: 3}

_REQUIRED_MATRICES = ("bus", "gen", "branch", "gencost")
_MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 7}


class CaseFormatError(ValueError):
    """A case file violates the accepted MATPOWER subset."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_demand: float
    q_demand: float
    v_min: float
    v_max: float
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus_id: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_a: float
    cost_b: float
    cost_c: float
    v_setpoint: float = 1.0
    # Free zero-cost injector attached to an interface bus by the splitter;
    # never produced by the parser.
    is_aux: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    status: bool = True


@dataclass
class Network:
    """Validated per-unit grid model with dense internal bus indexing."""

    base_mva: float
    buses: list[Bus]
    generators: list[Generator]
    branches: list[Branch]
    name: str = "case"
    bus_index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.bus_index = {bus.id: i for i, bus in enumerate(self.buses)}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    def index_of(self, bus_id: int) -> int:
        return self.bus_index[bus_id]

    def generators_at(self, bus_id: int) -> list[int]:
        return [g for g, gen in enumerate(self.generators) if gen.bus_id == bus_id]

    def slack_index(self) -> int | None:
        for i, bus in enumerate(self.buses):
            if bus.kind == SLACK:
                return i
        return None


@dataclass
class AdmittanceMatrix:
    """Sparse complex bus admittance matrix on internal bus indices."""

    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _strip_comments(text: str) -> str:
    # Keep newlines so character offsets still map to line numbers.
    lines = []
    for line in text.split("\n"):
        cut = line.find("%")
        lines.append(line if cut < 0 else line[:cut])
    return "\n".join(lines)


def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def _parse_number(token: str, text: str, pos: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise CaseFormatError(f"non-numeric token {token!r}", _line_of(text, pos)) from None


def _parse_matrix(text: str, start: int) -> tuple[list[tuple[list[float], int]], int]:
    """Parse ``[ rows ]`` starting at the ``[``; rows end at ``;`` or newline.

    Returns (rows, end) where each row is (values, line number) and end is
    the offset just past the closing bracket.
    """
    close = text.find("]", start)
    if close < 0:
        raise CaseFormatError("unterminated matrix", _line_of(text, start))
    body = text[start + 1:close]
    rows: list[tuple[list[float], int]] = []
    offset = start + 1
    for chunk in re.split(r"[;\n]", body):
        stripped = chunk.strip()
        if stripped:
            values = [_parse_number(tok, text, offset) for tok in stripped.split()]
            rows.append((values, _line_of(text, offset + chunk.index(stripped[0]))))
        offset += len(chunk) + 1
    return rows, close + 1


def _skip_value(text: str, start: int) -> int:
    """Skip an unknown field's value (string, matrix, cell or scalar)."""
    i = start
    while i < len(text) and text[i] in " \t\n":
        i += 1
    if i < len(text) and text[i] == "'":
        end = text.find("'", i + 1)
        i = end + 1 if end >= 0 else len(text)
    elif i < len(text) and text[i] in "[{":
        closer = "]" if text[i] == "[" else "}"
        end = text.find(closer, i)
        i = end + 1 if end >= 0 else len(text)
    semi = text.find(";", i)
    return semi + 1 if semi >= 0 else len(text)


_ASSIGN_RE = re.compile(r"mpc\s*\.\s*(\w+)\s*=")
_HEADER_RE = re.compile(r"function\s+mpc\s*=\s*(\w+)")


def parse_case(text: str) -> Network:
    """Parse MATPOWER-subset case text into a per-unit :class:`Network`.

    Out-of-service branches and generators are dropped.  Raises
    :class:`CaseFormatError` with a line number on malformed input.
    """
    clean = _strip_comments(text)
    name = "case"
    header = _HEADER_RE.search(clean)
    if header:
        name = header.group(1)

    scalars: dict[str, float] = {}
    matrices: dict[str, list[tuple[list[float], int]]] = {}
    pos = 0
    while True:
        m = _ASSIGN_RE.search(clean, pos)
        if not m:
            break
        fieldname = m.group(1)
        vstart = m.end()
        while vstart < len(clean) and clean[vstart] in " \t\n":
            vstart += 1
        known = fieldname == "baseMVA" or fieldname in _REQUIRED_MATRICES
        if not known:
            pos = _skip_value(clean, m.end())
            continue
        if vstart >= len(clean):
            raise CaseFormatError(f"missing value for {fieldname}", _line_of(clean, m.start()))
        if clean[vstart] == "[":
            rows, pos = _parse_matrix(clean, vstart)
            matrices[fieldname] = rows
        else:
            semi = clean.find(";", vstart)
            if semi < 0:
                raise CaseFormatError(f"missing ';' after {fieldname}", _line_of(clean, vstart))
            token = clean[vstart:semi].strip()
            scalars[fieldname] = _parse_number(token, clean, vstart)
            pos = semi + 1

    if "baseMVA" not in scalars:
        raise CaseFormatError("missing required field baseMVA")
    base = scalars["baseMVA"]
    if base <= 0:
        raise CaseFormatError("baseMVA must be positive")
    for required in _REQUIRED_MATRICES:
        if required not in matrices:
            raise CaseFormatError(f"missing required matrix {required}")

    for fieldname, rows in matrices.items():
        want = _MIN_COLUMNS[fieldname]
        for values, line in rows:
            if len(values) < want:
                raise CaseFormatError(
                    f"{fieldname} row has {len(values)} columns, expected at least {want}", line
                )

    buses: list[Bus] = []
    seen_ids: set[int] = set()
    for values, line in matrices["bus"]:
        bus_id = int(values[0])
        if bus_id in seen_ids:
            raise CaseFormatError(f"duplicate bus id {bus_id}", line)
        seen_ids.add(bus_id)
        code = int(values[1])
        if code not in _BUS_KIND_FROM_CODE:
            raise CaseFormatError(f"unsupported bus type {code}", line)
        buses.append(Bus(
            id=bus_id,
            kind=_BUS_KIND_FROM_CODE[code],
            p_demand=values[2] / base,
            q_demand=values[3] / base,
            v_min=values[12],
            v_max=values[11],
            shunt_g=values[4] / base,
            shunt_b=values[5] / base,
        ))

    gen_rows = matrices["gen"]
    cost_rows = matrices["gencost"]
    if len(cost_rows) != len(gen_rows):
        raise CaseFormatError(
            f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators",
            cost_rows[0][1] if cost_rows else None,
        )
    generators: list[Generator] = []
    for (values, line), (cost, cost_line) in zip(gen_rows, cost_rows):
        bus_id = int(values[0])
        if bus_id not in seen_ids:
            raise CaseFormatError(f"generator references unknown bus {bus_id}", line)
        if int(cost[0]) != 2:
            raise CaseFormatError(
                f"unsupported gencost model {int(cost[0])} (only polynomial model 2)", cost_line
            )
        if int(cost[3]) != 3 or len(cost) != 7:
            raise CaseFormatError("gencost must have exactly 3 polynomial coefficients", cost_line)
        if int(values[7]) == 0:
            continue
        generators.append(Generator(
            bus_id=bus_id,
            p_min=values[9] / base,
            p_max=values[8] / base,
            q_min=values[4] / base,
            q_max=values[3] / base,
            cost_a=cost[4],
            cost_b=cost[5],
            cost_c=cost[6],
            v_setpoint=values[5],
        ))

    branches: list[Branch] = []
    for values, line in matrices["branch"]:
        f_id, t_id = int(values[0]), int(values[1])
        for bus_id in (f_id, t_id):
            if bus_id not in seen_ids:
                raise CaseFormatError(f"branch references unknown bus {bus_id}", line)
        if int(values[10]) == 0:
            continue
        ratio = values[8]
        branches.append(Branch(
            from_bus=f_id,
            to_bus=t_id,
            r=values[2],
            x=values[3],
            b_charge=values[4],
            tap=ratio if ratio != 0.0 else 1.0,
            shift=math.radians(values[9]),
            status=True,
        ))

    return Network(base_mva=base, buses=buses, generators=generators,
                   branches=branches, name=name)


def load_case(path) -> Network:
    """Read and parse a case file from disk."""
    with open(path, encoding="utf-8") as handle:
        return parse_case(handle.read())


# ---------------------------------------------------------------------------
# canonical echo
# ---------------------------------------------------------------------------

def _scale_exact(value: float, base: float) -> float:
    """Return y with y/base == value exactly, nudging by ulps if needed."""
    y = value * base
    if y / base == value:
        return y
    for _ in range(64):
        y_up = math.nextafter(y, math.inf)
        if y_up / base == value:
            return y_up
        y = y_up if abs(y_up / base - value) < abs(y / base - value) else y
        y_dn = math.nextafter(y, -math.inf)
        if y_dn / base == value:
            return y_dn
        y = y_dn if abs(y_dn / base - value) < abs(y / base - value) else y
    raise ValueError(f"cannot represent {value} * {base} reversibly")


def _degrees_exact(radians: float) -> float:
    """Return d with math.radians(d) == radians exactly."""
    d = math.degrees(radians)
    if math.radians(d) == radians:
        return d
    lo, hi = math.nextafter(d, -math.inf), math.nextafter(d, math.inf)
    for _ in range(128):
        if math.radians(lo) == radians:
            return lo
        if math.radians(hi) == radians:
            return hi
        lo = math.nextafter(lo, -math.inf)
        hi = math.nextafter(hi, math.inf)
    raise ValueError(f"cannot represent {radians} rad in degrees reversibly")


def _fmt(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def emit_case(net: Network) -> str:
    """Write the canonical MATPOWER-subset echo of a network.

    Parsing the emitted text yields a network equal to ``net``.  Fields the
    model does not carry (areas, ratings, initial voltages) are emitted as
    canonical defaults.
    """
    base = net.base_mva
    out = [f"function mpc = {net.name}", f"mpc.baseMVA = {_fmt(base)};"]

    out.append("mpc.bus = [")
    for bus in net.buses:
        row = [bus.id, _BUS_CODE_FROM_KIND[bus.kind],
               _fmt(_scale_exact(bus.p_demand, base)), _fmt(_scale_exact(bus.q_demand, base)),
               _fmt(_scale_exact(bus.shunt_g, base)), _fmt(_scale_exact(bus.shunt_b, base)),
               1, 1, 0, 0, 1, _fmt(bus.v_max), _fmt(bus.v_min)]
        out.append("\t" + "\t".join(str(v) for v in row) + ";")
    out.append("];")

    out.append("mpc.gen = [")
    for gen in net.generators:
        row = [gen.bus_id, 0, 0,
               _fmt(_scale_exact(gen.q_max, base)), _fmt(_scale_exact(gen.q_min, base)),
               _fmt(gen.v_setpoint), _fmt(base), 1,
               _fmt(_scale_exact(gen.p_max, base)), _fmt(_scale_exact(gen.p_min, base))]
        out.append("\t" + "\t".join(str(v) for v in row) + ";")
    out.append("];")

    out.append("mpc.branch = [")
    for br in net.branches:
        row = [br.from_bus, br.to_bus, _fmt(br.r), _fmt(br.x), _fmt(br.b_charge),
               0, 0, 0, _fmt(br.tap), _fmt(_degrees_exact(br.shift)), 1]
        out.append("\t" + "\t".join(str(v) for v in row) + ";")
    out.append("];")

    out.append("mpc.gencost = [")
    for gen in net.generators:
        row = [2, 0, 0, 3, _fmt(gen.cost_a), _fmt(gen.cost_b), _fmt(gen.cost_c)]
        out.append("\t" + "\t".join(str(v) for v in row) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _connected_components(net: Network) -> list[set[int]]:
    adjacency: dict[int, set[int]] = {i: set() for i in range(net.n_buses)}
    for br in net.branches:
        if not br.status:
            continue
        if br.from_bus in net.bus_index and br.to_bus in net.bus_index:
            a, b = net.bus_index[br.from_bus], net.bus_index[br.to_bus]
            adjacency[a].add(b)
            adjacency[b].add(a)
    remaining = set(range(net.n_buses))
    components = []
    while remaining:
        start = min(remaining)
        stack, comp = [start], {start}
        while stack:
            node = stack.pop()
            for nb in adjacency[node]:
                if nb not in comp:
                    comp.add(nb)
                    stack.append(nb)
        components.append(comp)
        remaining -= comp
    return components


def validate(net: Network) -> list[str]:
    """Check all model invariants; returns human-readable violations."""
    problems: list[str] = []
    ids = [bus.id for bus in net.buses]
    if len(set(ids)) != len(ids):
        problems.append("duplicate bus ids")
    if net.base_mva <= 0:
        problems.append("non-positive base power")

    slack_count = 0
    for bus in net.buses:
        if bus.kind == SLACK:
            slack_count += 1
        if bus.kind not in _BUS_CODE_FROM_KIND:
            problems.append(f"bus {bus.id}: unknown kind {bus.kind!r}")
        if bus.v_min > bus.v_max:
            problems.append(f"bus {bus.id}: v_min > v_max")
        if bus.v_min <= 0:
            problems.append(f"bus {bus.id}: non-positive v_min")
    if slack_count == 0:
        problems.append("no slack bus")
    elif slack_count > 1:
        problems.append("multiple slack buses")

    if not net.generators:
        problems.append("no generators")
    for g, gen in enumerate(net.generators):
        if gen.bus_id not in net.bus_index:
            problems.append(f"generator {g}: unknown bus {gen.bus_id}")
        if gen.p_min > gen.p_max:
            problems.append(f"generator {g}: p_min > p_max")
        if gen.q_min > gen.q_max:
            problems.append(f"generator {g}: q_min > q_max")
        if gen.cost_a < 0:
            problems.append(f"generator {g}: negative quadratic cost coefficient")

    for b, br in enumerate(net.branches):
        if br.from_bus not in net.bus_index or br.to_bus not in net.bus_index:
            problems.append(f"branch {b}: unknown bus reference")
            continue
        if br.from_bus == br.to_bus:
            problems.append(f"branch {b}: self-loop at bus {br.from_bus}")
        if br.status and br.r == 0.0 and br.x == 0.0:
            problems.append(f"branch {b}: zero series impedance")
        if br.tap <= 0:
            problems.append(f"branch {b}: non-positive tap")

    if net.n_buses > 0 and len(_connected_components(net)) > 1:
        problems.append("disconnected network")
    return problems


# ---------------------------------------------------------------------------
# admittance matrix
# ---------------------------------------------------------------------------

def build_ybus(net: Network) -> AdmittanceMatrix:
    """Assemble the complex bus admittance matrix (standard pi model).

    Each in-service branch with series admittance y = 1/(r + jx), total
    charging b_c, tap t and shift sigma contributes

        Y_ff += (y + j*b_c/2) / t**2      Y_ft += -y / (t * e^{-j*sigma})
        Y_tf += -y / (t * e^{+j*sigma})   Y_tt +=  y + j*b_c/2

    and bus shunts g + jb are added to the diagonal.
    """
    n = net.n_buses
    rows, cols, vals = [], [], []
    for b, br in enumerate(net.branches):
        if not br.status:
            continue
        if br.r == 0.0 and br.x == 0.0:
            raise ValueError(f"branch {b} ({br.from_bus}-{br.to_bus}): zero series impedance")
        f = net.bus_index[br.from_bus]
        t = net.bus_index[br.to_bus]
        y = 1.0 / complex(br.r, br.x)
        charge = 0.5j * br.b_charge
        tap = br.tap * cmath.exp(1j * br.shift)
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [(y + charge) / (br.tap * br.tap),
                 y + charge,
                 -y / tap.conjugate(),
                 -y / tap]
    for i, bus in enumerate(net.buses):
        rows.append(i)
        cols.append(i)
        vals.append(complex(bus.shunt_g, bus.shunt_b))
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)
    matrix.sum_duplicates()
    matrix.eliminate_zeros()
    return AdmittanceMatrix(matrix=matrix)
