"""YAML model descriptions.

Schema::

    model:
      catastrophe_rate: 0.5            # number, or {breakpoints: [...], values: [...]}
      classes:
        - arrival_rate: 1.0            # omitted in shared-batch mode
          service: {kind: exponential, rate: 1.0}
          batch: {1: 0.5, 2: 0.5}      # optional; or {geometric: 0.4, max_size: 60}
                                       # a truncation_mass key records mass cut from the tail
      shared_batch:                    # optional, excludes per-class rates and batches
        rate: 1.0
        masses:
          - {sizes: [1, 0], mass: 0.5}
          - {sizes: [1, 1], mass: 0.5}
    run:                               # every key optional
      command: compare                 # transient | busy | simulate | compare
      times: [0.5, 1, 2]
      state_cutoff: 20
      s_values: [0.5, 1, 2]
      df_times: [0.5, 1, 2, 4]
      replications: 100000
      busy_cycles: 100000
      seed: 1
      tol: 1.0e-9
      out: results

Service kinds and their keys: deterministic (time), exponential (rate),
erlang (shape, rate), hyperexponential (weights, rates), empirical
(table: list of [time, cdf] pairs).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import BatchLaw, CustomerClass, ModelSpec, RateFunction, ServiceDistribution

COMMANDS = ("transient", "busy", "simulate", "compare")

_SERVICE_KEYS = {
    "deterministic": ("time",),
    "exponential": ("rate",),
    "erlang": ("shape", "rate"),
    "hyperexponential": ("weights", "rates"),
    "empirical": ("table",),
}

RUN_DEFAULTS = {
    "command": "compare",
    "times": [0.5, 1.0, 2.0],
    "state_cutoff": 20,
    "s_values": [0.5, 1.0, 2.0],
    "df_times": [0.5, 1.0, 2.0, 4.0],
    "replications": 20000,
    "busy_cycles": 20000,
    "seed": 0,
    "tol": 1e-9,
    "out": "results",
}


class ConfigError(ValueError):
    """Schema violations, each prefixed with the offending line."""

    def __init__(self, violations: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class RunManifest:
    command: str = "compare"
    config_path: str | None = None
    out_dir: str = "results"
    tol: float = 1e-9
    seed: int = 0
    replications: int = 20000
    busy_cycles: int = 20000
    times: tuple[float, ...] = (0.5, 1.0, 2.0)
    state_cutoff: int = 20
    s_values: tuple[float, ...] = (0.5, 1.0, 2.0)
    df_times: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    overrides: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"command must be one of {COMMANDS}")


# -- line bookkeeping --------------------------------------------------------------------


def _line_map(node, path=(), out=None) -> dict:
    """Map each path (tuple of keys / indices as strings) to its 1-based line."""
    if out is None:
        out = {}
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            _line_map(value, path + (str(key.value),), out)
            out[path + (str(key.value), "<key>")] = key.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_map(item, path + (str(i),), out)
    return out


class _Checker:
    def __init__(self, lines: dict):
        self.lines = lines
        self.violations: list[str] = []

    def line(self, path) -> int:
        path = tuple(str(p) for p in path)
        if path + ("<key>",) in self.lines:
            return self.lines[path + ("<key>",)]
        while path not in self.lines and path:
            path = path[:-1]
        return self.lines.get(path, 1)

    def fail(self, path, message: str):
        where = ""
        for p in path:
            if p == "<key>":
                continue
            where += f"[{p}]" if isinstance(p, int) else (f".{p}" if where else str(p))
        where = where or "<root>"
        self.violations.append(f"line {self.line(path)}: {where}: {message}")

    def mapping(self, value, path, allowed, required=()) -> dict | None:
        if not isinstance(value, dict):
            self.fail(path, "expected a mapping")
            return None
        for key in value:
            if str(key) not in allowed:
                self.fail(tuple(path) + (str(key), "<key>"), f"unknown key {key!r}")
        for key in required:
            if key not in value:
                self.fail(path, f"missing key {key!r}")
        return value

    def number(self, value, path, positive=False, nonnegative=False) -> float | None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
            return None
        if positive and not value > 0:
            self.fail(path, f"must be positive, got {value}")
            return None
        if nonnegative and not value >= 0:
            self.fail(path, f"must be nonnegative, got {value}")
            return None
        return float(value)

    def numbers(self, value, path, **kw) -> list[float] | None:
        if not isinstance(value, list) or not value:
            self.fail(path, "expected a nonempty list of numbers")
            return None
        out = [self.number(v, tuple(path) + (i,), **kw) for i, v in enumerate(value)]
        return None if any(v is None for v in out) else out

    def build(self, path, factory, *args):
        """Call a model constructor and turn its ValueError into a violation."""
        try:
            return factory(*args)
        except ValueError as exc:
            self.fail(path, str(exc))
            return None


# -- model section -------------------------------------------------------------------------


def _rate(ck: _Checker, value, path) -> RateFunction | None:
    if isinstance(value, dict):
        m = ck.mapping(value, path, ("breakpoints", "values"), ("breakpoints", "values"))
        if m is None or "values" not in m or "breakpoints" not in m:
            return None
        bps = m["breakpoints"] if m["breakpoints"] else []
        if bps:
            bps = ck.numbers(bps, tuple(path) + ("breakpoints",), positive=True)
        vals = ck.numbers(m["values"], tuple(path) + ("values",), nonnegative=True)
        if bps is None or vals is None:
            return None
        return ck.build(path, RateFunction.piecewise, bps, vals)
    v = ck.number(value, path, nonnegative=True)
    return None if v is None else RateFunction.constant(v)


def _service(ck: _Checker, value, path) -> ServiceDistribution | None:
    if not isinstance(value, dict) or "kind" not in value:
        ck.fail(path, "service needs a 'kind'")
        return None
    kind = value["kind"]
    if kind not in _SERVICE_KEYS:
        ck.fail(tuple(path) + ("kind",), f"unknown service kind {kind!r}")
        return None
    keys = _SERVICE_KEYS[kind]
    if ck.mapping(value, path, ("kind",) + keys, keys) is None or any(k not in value for k in keys):
        return None
    p = tuple(path)
    if kind == "deterministic":
        b = ck.number(value["time"], p + ("time",), positive=True)
        return None if b is None else ck.build(path, ServiceDistribution.deterministic, b)
    if kind == "exponential":
        r = ck.number(value["rate"], p + ("rate",), positive=True)
        return None if r is None else ck.build(path, ServiceDistribution.exponential, r)
    if kind == "erlang":
        shape = value["shape"]
        if isinstance(shape, bool) or not isinstance(shape, int) or shape < 1:
            ck.fail(p + ("shape",), f"erlang shape must be a positive integer, got {shape!r}")
            return None
        r = ck.number(value["rate"], p + ("rate",), positive=True)
        return None if r is None else ck.build(path, ServiceDistribution.erlang, shape, r)
    if kind == "hyperexponential":
        w = ck.numbers(value["weights"], p + ("weights",), nonnegative=True)
        r = ck.numbers(value["rates"], p + ("rates",), positive=True)
        return None if w is None or r is None else ck.build(path, ServiceDistribution.hyperexponential, w, r)
    table = value["table"]
    if not isinstance(table, list) or not table or not all(isinstance(row, list) and len(row) == 2 for row in table):
        ck.fail(p + ("table",), "empirical table must be a list of [time, cdf] pairs")
        return None
    rows = [ck.numbers(row, p + ("table", i), nonnegative=True) for i, row in enumerate(table)]
    if any(r is None for r in rows):
        return None
    return ck.build(path, ServiceDistribution.empirical, [tuple(r) for r in rows])


def _batch(ck: _Checker, value, path) -> BatchLaw | None:
    if not isinstance(value, dict) or not value:
        ck.fail(path, "batch must map sizes to masses")
        return None
    if "geometric" in value:
        m = ck.mapping(value, path, ("geometric", "max_size"), ("geometric", "max_size"))
        if m is None or "max_size" not in m:
            return None
        p = ck.number(m["geometric"], tuple(path) + ("geometric",), positive=True)
        n = m["max_size"]
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            ck.fail(tuple(path) + ("max_size",), "max_size must be a positive integer")
            return None
        return None if p is None else ck.build(path, BatchLaw.truncated_geometric, p, n)
    masses = {}
    value = dict(value)
    dropped = value.pop("truncation_mass", 0.0)
    dropped = ck.number(dropped, tuple(path) + ("truncation_mass",), nonnegative=True)
    for size, mass in value.items():
        kp = tuple(path) + (str(size),)
        if isinstance(size, bool) or not isinstance(size, int) or size < 1:
            ck.fail(kp + ("<key>",), f"batch sizes must be positive integers, got {size!r}")
            continue
        q = ck.number(mass, kp, nonnegative=True)
        if q is not None:
            masses[size] = q
    if len(masses) != len(value) or dropped is None:
        return None
    if dropped == 0:
        return ck.build(path, BatchLaw.univariate, masses)
    sizes = tuple((n,) for n in sorted(masses))
    return ck.build(path, BatchLaw, "univariate", sizes, tuple(masses[n[0]] for n in sizes), dropped)


def _shared(ck: _Checker, value, path, k: int):
    m = ck.mapping(value, path, ("rate", "masses"), ("rate", "masses"))
    if m is None or "rate" not in m or "masses" not in m:
        return None, None
    rate = _rate(ck, m["rate"], tuple(path) + ("rate",))
    entries = m["masses"]
    if not isinstance(entries, list) or not entries:
        ck.fail(tuple(path) + ("masses",), "expected a list of {sizes, mass} entries")
        return None, None
    law = {}
    for i, e in enumerate(entries):
        ep = tuple(path) + ("masses", i)
        e = ck.mapping(e, ep, ("sizes", "mass"), ("sizes", "mass"))
        if e is None or "sizes" not in e or "mass" not in e:
            continue
        sizes = e["sizes"]
        if not isinstance(sizes, list) or len(sizes) != k or not all(
                isinstance(n, int) and not isinstance(n, bool) and n >= 0 for n in sizes):
            ck.fail(ep + ("sizes",), f"sizes must list {k} nonnegative integers")
            continue
        q = ck.number(e["mass"], ep + ("mass",), nonnegative=True)
        if q is not None:
            law[tuple(sizes)] = q
    if len(law) != len(entries) or rate is None:
        return None, None
    return ck.build(path, BatchLaw.multivariate, law), rate


def _model(ck: _Checker, value) -> ModelSpec | None:
    m = ck.mapping(value, ("model",), ("catastrophe_rate", "classes", "shared_batch"), ("classes",))
    if m is None or "classes" not in m:
        return None
    nu = _rate(ck, m.get("catastrophe_rate", 0.0), ("model", "catastrophe_rate"))
    raw = m["classes"]
    if not isinstance(raw, list) or not raw:
        ck.fail(("model", "classes"), "expected a nonempty list of classes")
        return None
    shared_mode = "shared_batch" in m
    classes = []
    ok = True
    for i, c in enumerate(raw):
        cp = ("model", "classes", i)
        c = ck.mapping(c, cp, ("arrival_rate", "service", "batch"), ("service",))
        if c is None or "service" not in c:
            ok = False
            continue
        service = _service(ck, c["service"], cp + ("service",))
        rate = batch = None
        if "arrival_rate" in c:
            rate = _rate(ck, c["arrival_rate"], cp + ("arrival_rate",))
            ok &= rate is not None
        elif not shared_mode:
            ck.fail(cp, "missing key 'arrival_rate'")
            ok = False
        if "batch" in c:
            batch = _batch(ck, c["batch"], cp + ("batch",))
            ok &= batch is not None
        if service is None:
            ok = False
            continue
        classes.append(CustomerClass(service, rate, batch or BatchLaw.single()))
    shared = batch_rate = None
    if shared_mode:
        shared, batch_rate = _shared(ck, m["shared_batch"], ("model", "shared_batch"), len(raw))
        ok &= shared is not None
    if not ok or nu is None:
        return None
    where = ("model", "shared_batch") if shared_mode else ("model",)
    return ck.build(where, ModelSpec, tuple(classes), nu, shared, batch_rate)


# -- run section -------------------------------------------------------------------------


def _run(ck: _Checker, value, config_path) -> RunManifest | None:
    value = {} if value is None else value
    m = ck.mapping(value, ("run",), tuple(RUN_DEFAULTS))
    if m is None:
        return None
    merged = {**RUN_DEFAULTS, **{k: v for k, v in m.items() if k in RUN_DEFAULTS}}
    p = ("run",)
    ok = True
    if merged["command"] not in COMMANDS:
        ck.fail(p + ("command",), f"command must be one of {', '.join(COMMANDS)}")
        ok = False
    lists = {}
    for key in ("times", "s_values", "df_times"):
        vals = ck.numbers(merged[key], p + (key,), positive=(key != "times"), nonnegative=True)
        if vals is None:
            ok = False
        elif vals != sorted(vals):
            ck.fail(p + (key,), "values must be ascending")
            ok = False
        lists[key] = tuple(vals or ())
    ints = {}
    for key, low in (("state_cutoff", 0), ("replications", 1), ("busy_cycles", 1), ("seed", 0)):
        v = merged[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < low:
            ck.fail(p + (key,), f"must be an integer >= {low}, got {v!r}")
            ok = False
        ints[key] = v
    tol = ck.number(merged["tol"], p + ("tol",), positive=True)
    if not isinstance(merged["out"], str):
        ck.fail(p + ("out",), "out must be a path string")
        ok = False
    if not ok or tol is None:
        return None
    return RunManifest(command=merged["command"], config_path=config_path, out_dir=merged["out"],
                       tol=tol, seed=ints["seed"], replications=ints["replications"],
                       busy_cycles=ints["busy_cycles"], times=lists["times"],
                       state_cutoff=ints["state_cutoff"], s_values=lists["s_values"],
                       df_times=lists["df_times"])


def parse_config(text: str, config_path: str | None = None) -> tuple[ModelSpec, RunManifest]:
    """Validate a YAML document; raises ConfigError listing every violation."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError([f"line {line}: <document>: not valid YAML ({getattr(exc, 'problem', exc)})"]) from None
    if node is None:
        raise ConfigError(["line 1: <root>: empty document"])
    ck = _Checker(_line_map(node))
    top = ck.mapping(data, (), ("model", "run"), ("model",))
    spec = manifest = None
    if top is not None:
        if "model" in top:
            spec = _model(ck, top["model"])
        manifest = _run(ck, top.get("run"), config_path)
    if ck.violations:
        raise ConfigError(ck.violations)
    return spec, manifest


def load_config(path) -> tuple[ModelSpec, RunManifest]:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


# -- serialisation ------------------------------------------------------------------------


def _dump_rate(rate: RateFunction):
    if len(rate.values) == 1:
        return rate.values[0]
    return {"breakpoints": list(rate.breakpoints), "values": list(rate.values)}


def _dump_service(d: ServiceDistribution) -> dict:
    p = d.params
    if d.kind == "deterministic":
        return {"kind": d.kind, "time": p[0]}
    if d.kind == "exponential":
        return {"kind": d.kind, "rate": p[0]}
    if d.kind == "erlang":
        return {"kind": d.kind, "shape": int(p[0]), "rate": p[1]}
    if d.kind == "hyperexponential":
        n = len(p) // 2
        return {"kind": d.kind, "weights": list(p[:n]), "rates": list(p[n:])}
    return {"kind": d.kind, "table": [[p[i], p[i + 1]] for i in range(0, len(p), 2)]}


def model_to_dict(spec: ModelSpec) -> dict:
    classes = []
    for c in spec.classes:
        entry = {}
        if c.arrival_rate is not None:
            entry["arrival_rate"] = _dump_rate(c.arrival_rate)
        entry["service"] = _dump_service(c.service)
        if c.batch.kind != "single":
            entry["batch"] = {n[0]: q for n, q in zip(c.batch.sizes, c.batch.masses)}
            if c.batch.truncation_mass > 0:
                entry["batch"]["truncation_mass"] = c.batch.truncation_mass
        classes.append(entry)
    out = {"catastrophe_rate": _dump_rate(spec.catastrophe_rate), "classes": classes}
    if spec.shared:
        out["shared_batch"] = {
            "rate": _dump_rate(spec.batch_rate),
            "masses": [{"sizes": list(n), "mass": q}
                       for n, q in zip(spec.shared_batch.sizes, spec.shared_batch.masses)]}
    return out


def dump_config(spec: ModelSpec, manifest: RunManifest | None = None) -> str:
    """YAML text that parses back to an equal spec (and manifest settings)."""
    doc = {"model": model_to_dict(spec)}
    if manifest is not None:
        doc["run"] = {"command": manifest.command, "times": list(manifest.times),
                      "state_cutoff": manifest.state_cutoff, "s_values": list(manifest.s_values),
                      "df_times": list(manifest.df_times), "replications": manifest.replications,
                      "busy_cycles": manifest.busy_cycles, "seed": manifest.seed,
                      "tol": manifest.tol, "out": manifest.out_dir}
    return yaml.safe_dump(doc, sort_keys=False)
