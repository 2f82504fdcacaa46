"""Flat ``key = value`` run configuration.

Every key is declared in ``KEYS`` with a parser, a default and a range
check. Unknown keys are rejected. The canonical form (sorted keys, values
re-rendered from their parsed form) is what gets hashed.
"""
import hashlib
import math


class ConfigError(ValueError):
    pass


def _bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _ints(s):
    s = str(s).strip()
    return tuple(int(x) for x in s.split(",") if x.strip()) if s else ()


def _floats(s):
    s = str(s).strip()
    return tuple(float(x) for x in s.split(",") if x.strip()) if s else ()


def _strs(s):
    return tuple(x.strip() for x in str(s).split(",") if x.strip())


def _delim(s):
    return "\t" if s in ("tab", "\\t") else s


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    if v == "\t":
        return "tab"
    return str(v)


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0.0 <= x <= 1.0


# key: (parser, default, check, description)
KEYS = {
    "seed": (int, 0, _nonneg, "run seed; every stochastic stream derives from it"),
    "data.source": (str, "synth", lambda s: s in ("synth", "csv"), "synth | csv"),
    "data.path": (str, "", None, "delimited input file with a header and a label column"),
    "data.delimiter": (_delim, ",", lambda s: len(s) == 1, "column delimiter; 'tab' for tab"),
    "data.numeric_fields": (_strs, (), None, "columns discretised as numeric"),
    "data.min_count": (int, 2, _pos, "tokens seen fewer times fold into OOV"),
    "discretize.log_base": (str, "natural", lambda s: s in ("natural", "e", "2", "e2", "10"), "log base"),
    "split.ratios": (_floats, (0.8, 0.1, 0.1), lambda r: len(r) == 3 and abs(sum(r) - 1) < 1e-9, "train,val,test"),
    "synth.n_fields": (int, 8, _pos, ""),
    "synth.cardinalities": (_ints, (200,) * 8, lambda c: all(x >= 1 for x in c), ""),
    "synth.n_informative": (int, 4, _nonneg, ""),
    "synth.n_rows": (int, 50_000, _pos, ""),
    "synth.noise_level": (float, 0.05, _unit, "probability a label is redrawn independently of the features"),
    "synth.zipf_exponent": (float, 1.1, _nonneg, ""),
    "synth.signal": (float, 1.5, _nonneg, "std of the hidden per-value logit weights"),
    "synth.bias": (float, -1.0, math.isfinite, ""),
    "model.dim": (int, 16, _pos, "max embedding dimension D"),
    "model.mlp": (_ints, (64, 32, 16), lambda h: len(h) >= 1 and all(x >= 1 for x in h), "hidden widths"),
    "model.batchnorm": (_bool, True, None, ""),
    "train.lr": (float, 1e-3, lambda x: 0 < x <= 1, ""),
    "train.l2": (float, 1e-4, lambda x: 0 <= x < 1, ""),
    "train.batch_size": (int, 512, lambda x: x >= 2, ""),
    "train.max_epochs": (int, 30, _pos, ""),
    "train.patience": (int, 2, _pos, ""),
    "prune.lr_t": (float, 1e-2, lambda x: 0 <= x <= 1, "threshold learning rate"),
    "prune.alpha": (float, 1e-5, _nonneg, "weight of the exponential threshold regulariser"),
    "prune.t_init": (float, 0.0, math.isfinite, "initial threshold"),
    "search.n_mutation": (int, 10, _nonneg, ""),
    "search.n_crossover": (int, 10, _nonneg, ""),
    "search.iterations": (int, 30, _nonneg, ""),
    "search.prob": (float, 0.1, _unit, ""),
    "search.topk": (int, 15, _pos, ""),
    "search.eval_batch": (int, 4096, _pos, ""),
    "retrain.baseline": (_bool, True, None, "also train the full-table reference model"),
}


class RunConfig:
    def __init__(self, values=None):
        self._v = {k: spec[1] for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key, value):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = KEYS[key][0]
        try:
            self._v[key] = parser(value) if isinstance(value, str) else _coerce(parser, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from None

    def validate(self):
        for k, (_, _, check, _) in KEYS.items():
            if check is not None and not check(self._v[k]):
                raise ConfigError(f"{k} = {_render(self._v[k])} is out of range")
        if len(self["synth.cardinalities"]) != self["synth.n_fields"]:
            raise ConfigError("synth.cardinalities needs one entry per synth.n_fields")
        if self["synth.n_informative"] > self["synth.n_fields"]:
            raise ConfigError("synth.n_informative exceeds synth.n_fields")
        if self["data.source"] == "csv" and not self["data.path"]:
            raise ConfigError("data.source = csv requires data.path")

    def __getitem__(self, key):
        return self._v[key]

    def with_overrides(self, pairs):
        vals = dict(self._v)
        out = RunConfig.__new__(RunConfig)
        out._v = vals
        for k, v in pairs.items():
            out.set(k, v)
        out.validate()
        return out

    def canonical(self):
        return "".join(f"{k} = {_render(self._v[k])}\n" for k in sorted(self._v))

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.canonical() == other.canonical()

    @classmethod
    def parse(cls, text):
        values = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {line_no}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in values:
                raise ConfigError(f"line {line_no}: duplicate key {k!r}")
            values[k] = v
        return cls(values)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read())


def _coerce(parser, value):
    if parser is _ints:
        return tuple(int(x) for x in value)
    if parser is _floats:
        return tuple(float(x) for x in value)
    if parser is _strs:
        return tuple(str(x) for x in value)
    return parser(value)


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
