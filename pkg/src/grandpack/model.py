"""Packing structures and system parameters.

A *configuration* records how many customers of each type are simultaneously
packed into one server of a given type.  Configuration sets must be monotone
(downward closed): removing any customer from a feasible configuration leaves
a feasible configuration.  ``generate_vector_packing`` builds such sets for
the common special case where feasibility means that the summed requirement
vectors of the packed customers fit within the server's resource vector.

``PackingModel`` bundles a validated configuration set with all rate, weight,
pool and policy parameters, normalized so that the offered loads sum to one
and the first server weight equals one.  Models are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_MAX_CONFIGS = 10_000

_NORMALIZE_TOL = 1e-12


class ModelError(ValueError):
    """Invalid model definition."""


class UnboundedSetError(ModelError):
    """Some customer type fits in unbounded numbers into some server."""


class ConfigurationLimitError(ModelError):
    """Configuration enumeration exceeded the hard cap."""


@dataclass(frozen=True, order=True)
class Configuration:
    """A feasible multiset of customers packed into a server of one type.

    ``server_type`` is a 0-based index; ``counts`` has one nonnegative entry
    per customer type.  Ordering is lexicographic by server type then counts,
    which is the canonical ordering used everywhere (CSV columns, edge lists).
    """

    server_type: int
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.server_type < 0:
            raise ModelError(f"negative server type index {self.server_type}")
        for c in self.counts:
            if not isinstance(c, int) or c < 0:
                raise ModelError(f"configuration counts must be nonnegative integers, got {self.counts}")

    @property
    def is_zero(self) -> bool:
        return all(c == 0 for c in self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def plus(self, i: int) -> "Configuration":
        counts = list(self.counts)
        counts[i] += 1
        return Configuration(self.server_type, tuple(counts))

    def minus(self, i: int) -> "Configuration":
        if self.counts[i] < 1:
            raise ModelError(f"cannot remove type {i} from {self}")
        counts = list(self.counts)
        counts[i] -= 1
        return Configuration(self.server_type, tuple(counts))

    def label(self) -> str:
        return f"s{self.server_type + 1}:({' '.join(str(c) for c in self.counts)})"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.label()


def zero_configuration(server_type: int, num_types: int) -> Configuration:
    return Configuration(server_type, (0,) * num_types)


@dataclass(frozen=True)
class MonotonicityReport:
    """Result of ``validate_monotone``; falsy when violations exist."""

    ok: bool
    # (present configuration, missing smaller configuration) witnesses
    missing: tuple[tuple[Configuration, Configuration], ...] = ()
    unservable_types: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "ok"
        lines = []
        for witness, absent in self.missing:
            lines.append(f"missing predecessor {absent.label()} of {witness.label()}")
        for i in self.unservable_types:
            lines.append(f"customer type {i + 1} cannot be served by any server type")
        return "; ".join(lines)


class ConfigurationSet:
    """Per-server-type families of nonzero configurations plus index tables.

    The zero configuration of every server type is implicitly a member; only
    nonzero configurations are stored.  Construction sorts canonically and
    rejects duplicates; monotonicity is checked separately by
    ``validate_monotone``.
    """

    def __init__(self, num_types: int, num_servers: int, configs):
        if num_types < 1 or num_servers < 1:
            raise ModelError("need at least one customer type and one server type")
        self.num_types = int(num_types)
        self.num_servers = int(num_servers)
        cleaned = []
        for cfg in configs:
            if not isinstance(cfg, Configuration):
                raise ModelError(f"expected Configuration, got {cfg!r}")
            if len(cfg.counts) != self.num_types:
                raise ModelError(f"{cfg.label()} has {len(cfg.counts)} counts, expected {self.num_types}")
            if cfg.server_type >= self.num_servers:
                raise ModelError(f"{cfg.label()} refers to server type beyond {self.num_servers}")
            if cfg.is_zero:
                continue  # zero configurations are implicit
            cleaned.append(cfg)
        cleaned.sort()
        for prev, cur in zip(cleaned, cleaned[1:]):
            if prev == cur:
                raise ModelError(f"duplicate configuration {cur.label()}")
        self.configs: tuple[Configuration, ...] = tuple(cleaned)
        self._index = {cfg: idx for idx, cfg in enumerate(self.configs)}
        self._tables = None

    @classmethod
    def from_counts(cls, num_types: int, per_server: dict[int, list]) -> "ConfigurationSet":
        """Build from ``{server_type: [count tuples]}`` with 0-based server keys."""
        num_servers = max(per_server) + 1 if per_server else 1
        configs = [
            Configuration(s, tuple(int(c) for c in counts))
            for s, counts_list in per_server.items()
            for counts in counts_list
        ]
        return cls(num_types, num_servers, configs)

    def __len__(self) -> int:
        return len(self.configs)

    def __contains__(self, cfg: Configuration) -> bool:
        return cfg in self._index

    def index_of(self, cfg: Configuration) -> int:
        return self._index[cfg]

    def per_server(self, s: int) -> tuple[Configuration, ...]:
        return tuple(cfg for cfg in self.configs if cfg.server_type == s)

    def labels(self) -> list[str]:
        return [cfg.label() for cfg in self.configs]

    @property
    def tables(self) -> "IndexTables":
        """Precomputed index arrays; requires a monotone-valid set."""
        if self._tables is None:
            self._tables = IndexTables(self)
        return self._tables


def validate_monotone(config_set: ConfigurationSet) -> MonotonicityReport:
    """Check downward closure and servability of every customer type.

    Every configuration ``k'`` with ``k' <= k`` componentwise (same server
    type) must be present for each member ``k``, and each customer type must
    fit alone into at least one server type.  All missing predecessors are
    listed, each with one containing witness.
    """
    present = set(config_set.configs)
    missing: dict[Configuration, Configuration] = {}
    for cfg in config_set.configs:
        ranges = [range(c + 1) for c in cfg.counts]
        for counts in _iter_product(ranges):
            smaller = Configuration(cfg.server_type, counts)
            if smaller.is_zero or smaller in present:
                continue
            missing.setdefault(smaller, cfg)
    unservable = []
    for i in range(config_set.num_types):
        units = (
            Configuration(s, tuple(1 if j == i else 0 for j in range(config_set.num_types)))
            for s in range(config_set.num_servers)
        )
        if not any(u in present for u in units):
            unservable.append(i)
    ok = not missing and not unservable
    pairs = tuple(sorted((witness, absent) for absent, witness in missing.items()))
    return MonotonicityReport(ok, pairs, tuple(unservable))


def _iter_product(ranges):
    if not ranges:
        yield ()
        return
    for head in ranges[0]:
        for tail in _iter_product(ranges[1:]):
            yield (head,) + tail


def generate_vector_packing(resources, requirements, max_configs: int = DEFAULT_MAX_CONFIGS) -> ConfigurationSet:
    """Enumerate all configurations that fit requirement vectors into resources.

    ``resources`` is an (S, R) array of per-server-type resource vectors and
    ``requirements`` an (I, R) array of per-customer requirement vectors.  A
    configuration ``k`` of server type ``s`` is feasible iff
    ``sum_i k_i * requirements[i] <= resources[s]`` componentwise.  The output
    is downward closed by construction.
    """
    res = np.atleast_2d(np.asarray(resources, dtype=float))
    req = np.atleast_2d(np.asarray(requirements, dtype=float))
    if res.shape[1] != req.shape[1]:
        raise ModelError(f"resource dimension {res.shape[1]} != requirement dimension {req.shape[1]}")
    if (res < 0).any() or (req < 0).any():
        raise ModelError("resources and requirements must be nonnegative")
    num_servers, num_types = res.shape[0], req.shape[0]
    for i in range(num_types):
        if not (req[i] > 0).any():
            raise UnboundedSetError(
                f"customer type {i + 1} has an all-zero requirement vector; its configurations are unbounded"
            )

    configs: list[Configuration] = []
    for s in range(num_servers):
        stack = [((), res[s])]
        for i in range(num_types):
            new_stack = []
            for prefix, remaining in stack:
                positive = req[i] > 0
                # 1e-9 guards float noise at exactly-integral capacity ratios
                bound = int(math.floor(np.min(remaining[positive] / req[i][positive]) + 1e-9))
                for k_i in range(bound + 1):
                    new_stack.append((prefix + (k_i,), remaining - k_i * req[i]))
                    if len(new_stack) + len(configs) > max_configs + num_servers:
                        raise ConfigurationLimitError(
                            f"vector packing enumeration exceeded the cap of {max_configs} configurations"
                        )
            stack = new_stack
        configs.extend(Configuration(s, counts) for counts, _ in stack)

    nonzero = [cfg for cfg in configs if not cfg.is_zero]
    if len(nonzero) > max_configs:
        raise ConfigurationLimitError(
            f"vector packing produced {len(nonzero)} configurations, exceeding the cap of {max_configs}"
        )
    return ConfigurationSet(num_types, num_servers, nonzero)


def build_edges(config_set: ConfigurationSet) -> tuple[tuple[Configuration, int], ...]:
    """All pairs (k, i) with k nonzero and k_i >= 1, in canonical order.

    The pair (k, i) names the transition edge between k - e_i and k along
    which type-i customers arrive and depart.  Ordering is lexicographic by
    server type, then counts, then customer type.
    """
    edges = []
    for cfg in config_set.configs:
        for i, c in enumerate(cfg.counts):
            if c >= 1:
                edges.append((cfg, i))
    return tuple(edges)


class IndexTables:
    """Flat numpy views of a configuration set: counts, edges, availability.

    Built once per set and shared by the simulator, fluid dynamics and
    solvers so every component walks configurations and edges in the same
    canonical order.
    """

    def __init__(self, config_set: ConfigurationSet):
        cs = config_set
        self.config_set = cs
        self.num_configs = len(cs.configs)
        self.num_types = cs.num_types
        self.num_servers = cs.num_servers
        n, I, S = self.num_configs, cs.num_types, cs.num_servers

        self.counts = np.array([cfg.counts for cfg in cs.configs], dtype=np.int64).reshape(n, I)
        self.server = np.array([cfg.server_type for cfg in cs.configs], dtype=np.int64)
        self.c_factorial = np.array(
            [float(math.prod(math.factorial(c) for c in cfg.counts)) for cfg in cs.configs]
        )
        self.labels = cs.labels()
        self.per_server = [np.flatnonzero(self.server == s) for s in range(S)]

        self.unit_index = np.full((S, I), -1, dtype=np.int64)
        for s in range(S):
            for i in range(I):
                unit = Configuration(s, tuple(1 if j == i else 0 for j in range(I)))
                if unit in cs:
                    self.unit_index[s, i] = cs.index_of(unit)

        edge_pairs = build_edges(cs)
        E = len(edge_pairs)
        self.num_edges = E
        self.edge_cfg = np.empty(E, dtype=np.int64)
        self.edge_type = np.empty(E, dtype=np.int64)
        self.edge_count = np.empty(E, dtype=np.int64)
        self.edge_src = np.empty(E, dtype=np.int64)  # -1 when k - e_i is a zero configuration
        self.edge_server = np.empty(E, dtype=np.int64)
        self.edge_index: dict[tuple[int, int], int] = {}
        for e, (cfg, i) in enumerate(edge_pairs):
            k_idx = cs.index_of(cfg)
            self.edge_cfg[e] = k_idx
            self.edge_type[e] = i
            self.edge_count[e] = cfg.counts[i]
            self.edge_server[e] = cfg.server_type
            src = cfg.minus(i)
            self.edge_src[e] = -1 if src.is_zero else cs.index_of(src)
            self.edge_index[(k_idx, i)] = e
        self.edge_labels = [f"{cfg.label()}+{i + 1}" for cfg, i in edge_pairs]

        # per customer type: edges, zero-server placements, occupied placements
        self.type_edges = [np.flatnonzero(self.edge_type == i) for i in range(I)]
        self.zero_fits: list[np.ndarray] = []
        self.zero_edge: list[np.ndarray] = []
        self.join_src: list[np.ndarray] = []
        self.join_edge: list[np.ndarray] = []
        for i in range(I):
            servers = np.flatnonzero(self.unit_index[:, i] >= 0)
            self.zero_fits.append(servers)
            self.zero_edge.append(
                np.array([self.edge_index[(int(self.unit_index[s, i]), i)] for s in servers], dtype=np.int64)
            )
            srcs, edges = [], []
            for m_idx, cfg in enumerate(cs.configs):
                dst = cfg.plus(i)
                if dst in cs:
                    srcs.append(m_idx)
                    edges.append(self.edge_index[(cs.index_of(dst), i)])
            self.join_src.append(np.array(srcs, dtype=np.int64))
            self.join_edge.append(np.array(edges, dtype=np.int64))

        # python-native walk lists for the event loop hot path
        self.dep_walk = [
            [(int(self.edge_cfg[e]), int(self.edge_count[e]), int(e), int(self.edge_src[e])) for e in self.type_edges[i]]
            for i in range(I)
        ]
        self.zero_walk = [
            [(int(s), int(self.unit_index[s, i]), int(self.edge_index[(int(self.unit_index[s, i]), i)]))
             for s in self.zero_fits[i]]
            for i in range(I)
        ]
        self.join_walk = [
            [(int(m), int(self.edge_cfg[e]), int(e)) for m, e in zip(self.join_src[i], self.join_edge[i])]
            for i in range(I)
        ]


class PackingModel:
    """Validated, normalized parameter bundle for one service system.

    Normalization at construction: arrival rates are rescaled so the offered
    loads ``rho_i = lam_i / mu_i`` sum to one (equivalent to redefining the
    scale parameter), and server weights are rescaled so ``gamma_1 = 1``.
    Original values are kept in ``metadata``.  Instances are immutable.
    """

    def __init__(self, config_set: ConfigurationSet, lam, mu, gamma=None, a=None, h=None, p=None):
        report = validate_monotone(config_set)
        if not report.ok:
            raise ModelError(f"configuration set is not monotone: {report.describe()}")
        self.config_set = config_set
        I, S = config_set.num_types, config_set.num_servers

        lam = np.asarray(lam, dtype=float).reshape(I).copy()
        mu = np.asarray(mu, dtype=float).reshape(I).copy()
        if (lam <= 0).any() or (mu <= 0).any():
            raise ModelError("arrival and service rates must be strictly positive")
        self.metadata = {"original_lambda": lam.copy(), "lambda_scale": 1.0}
        total_rho = float(np.sum(lam / mu))
        if abs(total_rho - 1.0) > _NORMALIZE_TOL:
            lam = lam / total_rho
            self.metadata["lambda_scale"] = total_rho

        if gamma is None:
            gamma = np.ones(S)
        gamma = np.asarray(gamma, dtype=float).reshape(S).copy()
        if (gamma <= 0).any():
            raise ModelError("server weights must be strictly positive")
        self.metadata["original_gamma"] = gamma.copy()
        if gamma[0] != 1.0:
            gamma = gamma / gamma[0]

        self.lam = lam
        self.mu = mu
        self.rho = lam / mu
        self.gamma = gamma
        self.a = None if a is None else np.asarray(a, dtype=float).reshape(S).copy()
        self.h = None if h is None else np.asarray(h, dtype=float).reshape(S).copy()
        if self.a is not None and (self.a <= 0).any():
            raise ModelError("zero-server parameters a_s must be strictly positive")
        if self.h is not None and (self.h <= 0).any():
            raise ModelError("pool sizes h_s must be strictly positive")
        if p is not None and not (0.0 < p < 1.0):
            raise ModelError(f"exponent p must lie in (0, 1), got {p}")
        self.p = None if p is None else float(p)

        for arr in (self.lam, self.mu, self.rho, self.gamma, self.a, self.h):
            if arr is not None:
                arr.setflags(write=False)
        self.tables = config_set.tables

    @property
    def num_types(self) -> int:
        return self.config_set.num_types

    @property
    def num_servers(self) -> int:
        return self.config_set.num_servers

    @property
    def num_configs(self) -> int:
        return len(self.config_set)

    def replace(self, **kwargs) -> "PackingModel":
        """New model with some parameters substituted (re-normalizes)."""
        args = dict(
            config_set=self.config_set,
            lam=self.metadata["original_lambda"],
            mu=self.mu,
            gamma=self.metadata["original_gamma"],
            a=self.a,
            h=self.h,
            p=self.p,
        )
        args.update(kwargs)
        return PackingModel(**args)

    def require_a(self) -> np.ndarray:
        if self.a is None:
            raise ModelError("model has no zero-server parameters a_s (section [grand], key 'a' or 'alpha')")
        return self.a

    def require_h(self) -> np.ndarray:
        if self.h is None:
            raise ModelError("model has no pool sizes h_s (section [pools])")
        return self.h

    def require_p(self) -> float:
        if self.p is None:
            raise ModelError("model has no exponent p (section [grand], key 'p')")
        return self.p

    def describe(self) -> str:
        parts = [
            f"I={self.num_types} S={self.num_servers} |K|={self.num_configs}",
            f"rho={np.array2string(self.rho, precision=6)}",
            f"gamma={np.array2string(self.gamma, precision=6)}",
        ]
        if self.a is not None:
            parts.append(f"a={np.array2string(self.a, precision=6)}")
        if self.h is not None:
            parts.append(f"h={np.array2string(self.h, precision=6)}")
        if self.p is not None:
            parts.append(f"p={self.p}")
        return " ".join(parts)


def _parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(",", " ").split()]


def _parse_counts(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split())


def load_model(path) -> PackingModel:
    """Parse a model definition file.  See the repository README for the grammar.

    Sections: [types] count, [servers] count, exactly one of [configs]
    (explicit nonzero configurations per server) or [vector_packing]
    (server<j> resource rows and type<i> requirement rows), [rates] lambda/mu,
    optional [weights] gamma, [grand] a | alpha | p, [pools] h.
    """
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=None, delimiters=("=",))
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ModelError(f"cannot parse model file {path}: {exc}") from None

    def require(section: str) -> configparser.SectionProxy:
        if not parser.has_section(section):
            raise ModelError(f"model file is missing the [{section}] section")
        return parser[section]

    num_types = int(require("types").get("count", "0"))
    num_servers = int(require("servers").get("count", "0"))
    if num_types < 1 or num_servers < 1:
        raise ModelError("[types]/[servers] count must be >= 1")

    has_configs = parser.has_section("configs")
    has_vp = parser.has_section("vector_packing")
    if has_configs == has_vp:
        raise ModelError("exactly one of [configs] or [vector_packing] is required")

    if has_configs:
        per_server: dict[int, list] = {s: [] for s in range(num_servers)}
        for key, value in parser["configs"].items():
            if not key.startswith("server"):
                raise ModelError(f"[configs] keys must look like 'server<j>', got {key!r}")
            s = int(key[len("server"):]) - 1
            if not 0 <= s < num_servers:
                raise ModelError(f"[configs] {key!r} is out of range for {num_servers} server types")
            for chunk in value.split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                counts = _parse_counts(chunk)
                if len(counts) != num_types:
                    raise ModelError(f"configuration '{chunk}' must list {num_types} counts")
                per_server[s].append(counts)
        config_set = ConfigurationSet.from_counts(num_types, per_server)
        if config_set.num_servers < num_servers:
            config_set = ConfigurationSet(num_types, num_servers, config_set.configs)
        report = validate_monotone(config_set)
        if not report.ok:
            raise ModelError(f"[configs] set is not monotone: {report.describe()}")
    else:
        vp = parser["vector_packing"]
        resources, requirements = [], []
        for j in range(num_servers):
            key = f"server{j + 1}"
            if key not in vp:
                raise ModelError(f"[vector_packing] is missing {key}")
            resources.append(_parse_floats(vp[key]))
        for i in range(num_types):
            key = f"type{i + 1}"
            if key not in vp:
                raise ModelError(f"[vector_packing] is missing {key}")
            requirements.append(_parse_floats(vp[key]))
        config_set = generate_vector_packing(resources, requirements)

    rates = require("rates")
    lam = _parse_floats(rates.get("lambda", ""))
    mu = _parse_floats(rates.get("mu", ""))
    if len(lam) != num_types or len(mu) != num_types:
        raise ModelError(f"[rates] lambda and mu must each list {num_types} values")

    gamma = None
    if parser.has_section("weights") and parser["weights"].get("gamma"):
        gamma = _parse_floats(parser["weights"]["gamma"])
        if len(gamma) != num_servers:
            raise ModelError(f"[weights] gamma must list {num_servers} values")

    a = p = None
    if parser.has_section("grand"):
        grand = parser["grand"]
        if grand.get("a") and grand.get("alpha"):
            raise ModelError("[grand] keys 'a' and 'alpha' are mutually exclusive")
        if grand.get("a"):
            a = _parse_floats(grand["a"])
            if len(a) != num_servers:
                raise ModelError(f"[grand] a must list {num_servers} values")
        elif grand.get("alpha"):
            alpha = float(grand["alpha"])
            if not 0.0 < alpha < 1.0:
                raise ModelError(f"[grand] alpha must lie in (0, 1), got {alpha}")
            gamma_arr = np.ones(num_servers) if gamma is None else np.asarray(gamma, dtype=float)
            gamma_arr = gamma_arr / gamma_arr[0]
            a = list(alpha ** gamma_arr)
        if grand.get("p"):
            p = float(grand["p"])

    h = None
    if parser.has_section("pools") and parser["pools"].get("h"):
        h = _parse_floats(parser["pools"]["h"])
        if len(h) != num_servers:
            raise ModelError(f"[pools] h must list {num_servers} values")

    return PackingModel(config_set, lam, mu, gamma=gamma, a=a, h=h, p=p)
