"""Run configuration: TOML parsing, validation, overrides, and echo.

A config file is TOML with a handful of sections; parse_config turns the
text into a RunConfig, failing fast with the dotted path of the first
offending field. Sections for protocols other than the selected one may
be present (so one file can serve several runs via --set protocol=...),
but unknown keys inside a known section are rejected.

echo_config serializes a RunConfig back to TOML such that parsing the
echo reproduces the config exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import tomli

from .nn import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; message starts with the field path."""


@dataclass(frozen=True)
class SyntheticDataConfig:
    n_classes: int
    n_features: int
    n_per_class: int
    spread: float
    test_per_class: int


@dataclass(frozen=True)
class IdxDataConfig:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str


@dataclass(frozen=True)
class DatasetConfig:
    kind: str  # "synthetic" or "idx"
    synthetic: SyntheticDataConfig | None = None
    idx: IdxDataConfig | None = None


@dataclass(frozen=True)
class SplitConfig:
    open: int
    private: int


@dataclass(frozen=True)
class PartitionConfig:
    mode: str  # "iid" or "noniid_shards"
    clients: int
    shards_per_client: int | None = None


@dataclass(frozen=True)
class BackdoorConfig:
    n_per_class: int
    spread: float
    offset: float
    test_per_class: int


@dataclass(frozen=True)
class AttackConfig:
    kind: str  # "noisy_labels" | "noisy_open" | "poisoning"
    noisy_classes: int = 0            # noisy_labels
    noise_count: int = 0              # noisy_open
    noise_source: str = "uniform"     # noisy_open: "uniform" or "idx"
    noise_images: str | None = None   # noisy_open with idx source
    attack_period: int = 5            # poisoning
    pretrain_epochs: int = 5          # poisoning
    backdoor: BackdoorConfig | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    rounds: int
    protocol: str
    hidden_layers: tuple[int, ...]
    dataset: DatasetConfig
    split: SplitConfig
    partition: PartitionConfig
    update: TrainConfig
    distill: TrainConfig
    era_temperature: float = 0.1
    fd_gamma: float = 1.0
    open_per_round: int = 0
    attack: AttackConfig | None = None
    output_dir: str | None = None
    eval_round0: bool = False


_PROTOCOLS = ("fl", "fd", "dsfl_sa", "dsfl_era")


class _Section:
    """A dict wrapper that tracks consumed keys and builds dotted paths."""

    def __init__(self, raw: dict, path: str):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a table")
        self.raw = raw
        self.path = path
        self.seen = set()

    def _label(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, required: bool = True, default=None):
        self.seen.add(key)
        if key not in self.raw:
            if required:
                raise ConfigError(f"{self._label(key)}: missing required field")
            return default
        value = self.raw[key]
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{self._label(key)}: expected a number")
            return float(value)
        if kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{self._label(key)}: expected an integer")
            return value
        if kind is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{self._label(key)}: expected a boolean")
            return value
        if kind is str:
            if not isinstance(value, str):
                raise ConfigError(f"{self._label(key)}: expected a string")
            return value
        raise AssertionError(f"unsupported kind {kind}")

    def table(self, key: str, required: bool = True):
        self.seen.add(key)
        if key not in self.raw:
            if required:
                raise ConfigError(f"{self._label(key)}: missing required section")
            return None
        return _Section(self.raw[key], self._label(key))

    def reject_unknown(self):
        extra = sorted(set(self.raw) - self.seen)
        if extra:
            raise ConfigError(f"{self._label(extra[0])}: unknown field")


def _positive(section: _Section, key: str, value, strict: bool = True):
    bad = value <= 0 if strict else value < 0
    if bad:
        bound = "positive" if strict else "non-negative"
        raise ConfigError(f"{section._label(key)}: must be {bound}")
    return value


def _train_section(sec: _Section) -> TrainConfig:
    lr = sec.get("learning_rate", float)
    if lr < 0:
        raise ConfigError(f"{sec._label('learning_rate')}: must be non-negative")
    epochs = _positive(sec, "epochs", sec.get("epochs", int))
    batch = _positive(sec, "batch_size", sec.get("batch_size", int))
    sec.reject_unknown()
    return TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch)


def _dataset_section(sec: _Section) -> DatasetConfig:
    kind = sec.get("type", str)
    if kind == "synthetic":
        cfg = SyntheticDataConfig(
            n_classes=_positive(sec, "n_classes", sec.get("n_classes", int)),
            n_features=_positive(sec, "n_features", sec.get("n_features", int)),
            n_per_class=_positive(sec, "n_per_class", sec.get("n_per_class", int)),
            spread=_positive(sec, "spread", sec.get("spread", float)),
            test_per_class=_positive(sec, "test_per_class", sec.get("test_per_class", int)),
        )
        sec.reject_unknown()
        return DatasetConfig("synthetic", synthetic=cfg)
    if kind == "idx":
        cfg = IdxDataConfig(
            train_images=sec.get("train_images", str),
            train_labels=sec.get("train_labels", str),
            test_images=sec.get("test_images", str),
            test_labels=sec.get("test_labels", str),
        )
        sec.reject_unknown()
        return DatasetConfig("idx", idx=cfg)
    raise ConfigError(f"{sec._label('type')}: expected 'synthetic' or 'idx'")


def _attack_section(sec: _Section) -> AttackConfig:
    kind = sec.get("type", str)
    if kind == "noisy_labels":
        classes = sec.get("classes", int)
        if classes < 0:
            raise ConfigError(f"{sec._label('classes')}: must be non-negative")
        sec.reject_unknown()
        return AttackConfig("noisy_labels", noisy_classes=classes)
    if kind == "noisy_open":
        count = sec.get("count", int)
        if count < 0:
            raise ConfigError(f"{sec._label('count')}: must be non-negative")
        source = sec.get("source", str, required=False, default="uniform")
        if source not in ("uniform", "idx"):
            raise ConfigError(f"{sec._label('source')}: expected 'uniform' or 'idx'")
        images = sec.get("images", str, required=(source == "idx"), default=None)
        sec.reject_unknown()
        return AttackConfig("noisy_open", noise_count=count, noise_source=source,
                            noise_images=images)
    if kind == "poisoning":
        period = _positive(sec, "period", sec.get("period", int))
        pretrain = _positive(sec, "pretrain_epochs",
                             sec.get("pretrain_epochs", int, required=False, default=5))
        bd = sec.table("backdoor")
        backdoor = BackdoorConfig(
            n_per_class=_positive(bd, "n_per_class", bd.get("n_per_class", int)),
            spread=_positive(bd, "spread", bd.get("spread", float)),
            offset=bd.get("offset", float, required=False, default=2.0),
            test_per_class=_positive(bd, "test_per_class", bd.get("test_per_class", int)),
        )
        bd.reject_unknown()
        sec.reject_unknown()
        return AttackConfig("poisoning", attack_period=period,
                            pretrain_epochs=pretrain, backdoor=backdoor)
    raise ConfigError(
        f"{sec._label('type')}: expected 'noisy_labels', 'noisy_open' or 'poisoning'"
    )


def build_config(raw: dict) -> RunConfig:
    """Validate a parsed TOML tree into a RunConfig."""
    top = _Section(raw, "")
    seed = top.get("seed", int)
    if seed < 0:
        raise ConfigError("seed: must be non-negative")
    rounds = top.get("rounds", int)
    if rounds < 0:
        raise ConfigError("rounds: must be non-negative")
    protocol = top.get("protocol", str)
    if protocol not in _PROTOCOLS:
        raise ConfigError(f"protocol: expected one of {', '.join(_PROTOCOLS)}")
    eval_round0 = top.get("eval_round0", bool, required=False, default=False)
    output_dir = top.get("output_dir", str, required=False, default=None)

    model_sec = top.table("model")
    hidden = model_sec.raw.get("hidden_layers", None)
    model_sec.seen.add("hidden_layers")
    if not isinstance(hidden, list) or not hidden or \
            any(isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in hidden):
        raise ConfigError("model.hidden_layers: expected a non-empty list of positive integers")
    model_sec.reject_unknown()

    dataset = _dataset_section(top.table("dataset"))

    split_sec = top.table("split")
    split = SplitConfig(
        open=_positive(split_sec, "open", split_sec.get("open", int), strict=False),
        private=_positive(split_sec, "private", split_sec.get("private", int)),
    )
    split_sec.reject_unknown()

    part_sec = top.table("partition")
    mode = part_sec.get("mode", str)
    if mode not in ("iid", "noniid_shards"):
        raise ConfigError(f"{part_sec._label('mode')}: expected 'iid' or 'noniid_shards'")
    clients = _positive(part_sec, "clients", part_sec.get("clients", int))
    spc = part_sec.get("shards_per_client", int, required=(mode == "noniid_shards"),
                       default=None)
    if spc is not None:
        _positive(part_sec, "shards_per_client", spc)
    part_sec.reject_unknown()
    partition = PartitionConfig(mode, clients, spc if mode == "noniid_shards" else None)

    update = _train_section(top.table("update"))
    distill_sec = top.table("distill", required=False)
    distill = _train_section(distill_sec) if distill_sec is not None else update

    era_sec = top.table("era", required=(protocol == "dsfl_era"))
    era_temperature = 0.1
    if era_sec is not None:
        era_temperature = _positive(era_sec, "temperature", era_sec.get("temperature", float))
        era_sec.reject_unknown()

    fd_sec = top.table("fd", required=False)
    fd_gamma = 1.0
    if fd_sec is not None:
        fd_gamma = fd_sec.get("gamma", float)
        if fd_gamma < 0:
            raise ConfigError("fd.gamma: must be non-negative")
        fd_sec.reject_unknown()

    open_sec = top.table("open", required=protocol.startswith("dsfl"))
    open_per_round = 0
    if open_sec is not None:
        open_per_round = _positive(open_sec, "per_round", open_sec.get("per_round", int))
        open_sec.reject_unknown()
    if protocol.startswith("dsfl"):
        if split.open < 1:
            raise ConfigError("split.open: distillation protocols need open data")
        if open_per_round > split.open:
            raise ConfigError("open.per_round: cannot exceed split.open")

    attack_sec = top.table("attack", required=False)
    attack = _attack_section(attack_sec) if attack_sec is not None else None
    if attack is not None and attack.kind == "noisy_labels" and dataset.kind == "synthetic":
        if 2 * attack.noisy_classes > dataset.synthetic.n_classes:
            raise ConfigError("attack.classes: needs disjoint source and false classes")
    if attack is not None and attack.kind == "poisoning" and protocol == "fd":
        raise ConfigError("attack.type: poisoning is not defined for the fd protocol")
    if attack is not None and attack.kind == "poisoning" and dataset.kind == "idx":
        raise ConfigError("attack.type: poisoning backdoor sets require a synthetic dataset")

    top.reject_unknown()

    if dataset.kind == "synthetic":
        total = dataset.synthetic.n_classes * dataset.synthetic.n_per_class
        if split.open + split.private > total:
            raise ConfigError(
                f"split: open+private = {split.open + split.private} exceeds dataset size {total}"
            )

    return RunConfig(
        seed=seed, rounds=rounds, protocol=protocol,
        hidden_layers=tuple(hidden), dataset=dataset, split=split,
        partition=partition, update=update, distill=distill,
        era_temperature=era_temperature, fd_gamma=fd_gamma,
        open_per_round=open_per_round, attack=attack,
        output_dir=output_dir, eval_round0=eval_round0,
    )


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    return build_config(raw)


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_config(data.decode("utf-8"))


def parse_raw(text: str) -> dict:
    """TOML text to a raw tree, for override application before validation."""
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one --set assignment ('section.key=value' or 'key=value').

    The value is parsed as a TOML literal when possible (numbers, bools,
    quoted strings, lists) and falls back to a bare string otherwise.
    """
    if "=" not in assignment:
        raise ConfigError(f"--set {assignment!r}: expected path=value")
    path, text = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"--set {assignment!r}: empty field path")
    try:
        value = tomli.loads(f"v = {text.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = text.strip()
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {assignment!r}: {key} is not a section")
    node[keys[-1]] = value


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise AssertionError(f"cannot serialize {type(value)}")


def echo_config(cfg: RunConfig) -> str:
    """Serialize back to TOML; parse_config(echo_config(cfg)) == cfg."""
    lines = []

    def emit(key, value):
        lines.append(f"{key} = {_toml_value(value)}")

    emit("seed", cfg.seed)
    emit("rounds", cfg.rounds)
    emit("protocol", cfg.protocol)
    if cfg.eval_round0:
        emit("eval_round0", True)
    if cfg.output_dir is not None:
        emit("output_dir", cfg.output_dir)

    lines.append("")
    lines.append("[model]")
    emit("hidden_layers", list(cfg.hidden_layers))

    lines.append("")
    lines.append("[dataset]")
    emit("type", cfg.dataset.kind)
    if cfg.dataset.kind == "synthetic":
        s = cfg.dataset.synthetic
        emit("n_classes", s.n_classes)
        emit("n_features", s.n_features)
        emit("n_per_class", s.n_per_class)
        emit("spread", s.spread)
        emit("test_per_class", s.test_per_class)
    else:
        i = cfg.dataset.idx
        emit("train_images", i.train_images)
        emit("train_labels", i.train_labels)
        emit("test_images", i.test_images)
        emit("test_labels", i.test_labels)

    lines.append("")
    lines.append("[split]")
    emit("open", cfg.split.open)
    emit("private", cfg.split.private)

    lines.append("")
    lines.append("[partition]")
    emit("mode", cfg.partition.mode)
    emit("clients", cfg.partition.clients)
    if cfg.partition.shards_per_client is not None:
        emit("shards_per_client", cfg.partition.shards_per_client)

    for name, tc in (("update", cfg.update), ("distill", cfg.distill)):
        lines.append("")
        lines.append(f"[{name}]")
        emit("learning_rate", tc.learning_rate)
        emit("epochs", tc.epochs)
        emit("batch_size", tc.batch_size)

    lines.append("")
    lines.append("[era]")
    emit("temperature", cfg.era_temperature)

    lines.append("")
    lines.append("[fd]")
    emit("gamma", cfg.fd_gamma)

    if cfg.open_per_round:
        lines.append("")
        lines.append("[open]")
        emit("per_round", cfg.open_per_round)

    if cfg.attack is not None:
        a = cfg.attack
        lines.append("")
        lines.append("[attack]")
        emit("type", a.kind)
        if a.kind == "noisy_labels":
            emit("classes", a.noisy_classes)
        elif a.kind == "noisy_open":
            emit("count", a.noise_count)
            emit("source", a.noise_source)
            if a.noise_images is not None:
                emit("images", a.noise_images)
        else:
            emit("period", a.attack_period)
            emit("pretrain_epochs", a.pretrain_epochs)
            lines.append("")
            lines.append("[attack.backdoor]")
            emit("n_per_class", a.backdoor.n_per_class)
            emit("spread", a.backdoor.spread)
            emit("offset", a.backdoor.offset)
            emit("test_per_class", a.backdoor.test_per_class)

    return "\n".join(lines) + "\n"
