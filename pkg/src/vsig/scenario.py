"""Scenario files: `key = value` lines grouped under `[section]` headers.

    kind = bilateral            # or conference
    duration_ms = 60000

    [stream]
    packets_per_second = 50

    [channel.media]
    loss = 0.05
    bursts = 20000-23000:0.35

    [policy]
    threshold = 0.3
    action = terminate-call

    [change]                    # repeatable, conference only
    at_ms = 4000
    kind = leave
    participant = 2

Keys before the first header belong to the session. Every error names the
offending line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

from vsig.bilateral import BilateralConfig
from vsig.model import LossPolicy, PolicyAction
from vsig.multilateral import ConferenceScenario, MembershipChange
from vsig.netsim import DEFAULT_CHANNEL, ChannelSpec


class ScenarioError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _int(text: str) -> int:
    return int(text.replace("_", ""))


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ranges(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        start, end = part.split("-")
        out.append((_int(start), _int(end)))
    return tuple(out)


def _bursts(text: str) -> tuple[tuple[int, int, float], ...]:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        span, ratio = part.split(":")
        start, end = span.split("-")
        out.append((_int(start), _int(end), float(ratio)))
    return tuple(out)


SESSION_KEYS: dict[str, Callable] = {
    "kind": str,
    "seed": _int,
    "duration_ms": _int,
    "interval_ms": _int,
    "participants": _int,
    "epoch_ms": _int,
}
SECTION_KEYS: dict[str, dict[str, Callable]] = {
    "stream": {
        "packets_per_second": _int,
        "payload_bytes": _int,
        "silence_a": _ranges,
        "silence_b": _ranges,
        "clock_skew_ppm_a": float,
    },
    "channel": {
        "loss": float,
        "delay_min_ms": _int,
        "delay_max_ms": _int,
        "duplicate": float,
        "bursts": _bursts,
        "cut_at_ms": _int,
    },
    "policy": {"threshold": float, "window_ms": _int, "action": PolicyAction},
    "tsa": {"t1_available": _bool, "t2_available": _bool, "t2_skew_ms": _int},
    "change": {"at_ms": _int, "kind": str, "participant": _int},
}
CHANNELS = ("media", "media_ab", "media_ba", "signaling")
KINDS = ("bilateral", "conference")


@dataclass
class Scenario:
    """Parsed values keyed by section ("" for the session block). Values
    carry the line they came from so later checks can point at it."""

    sections: dict[str, dict[str, tuple[object, int]]] = field(default_factory=dict)
    changes: list[dict[str, tuple[object, int]]] = field(default_factory=list)
    source: str = "<scenario>"

    def get(self, section: str, key: str, default=None):
        entry = self.sections.get(section, {}).get(key)
        return default if entry is None else entry[0]

    def line_of(self, section: str, key: str) -> int:
        entry = self.sections.get(section, {}).get(key)
        return entry[1] if entry else 0

    @property
    def kind(self) -> str:
        return self.get("", "kind", "bilateral")

    def with_defaults(self, defaults: dict) -> "Scenario":
        """Fill session keys the file leaves unset from `defaults`; the
        file wins where both give a value."""
        merged = {k: dict(v) for k, v in self.sections.items()}
        for key, value in defaults.items():
            section, _, name = key.rpartition(".")
            if value is not None and name not in merged.get(section, {}):
                merged.setdefault(section, {})[name] = (value, 0)
        return dataclasses.replace(self, sections=merged)

    # -- engine configurations

    def _channel(self, name: str) -> Optional[ChannelSpec]:
        values = self.sections.get(f"channel.{name}")
        if values is None:
            return None
        v = {k: val for k, (val, _) in values.items()}
        line = min(line for _, line in values.values())
        try:
            return ChannelSpec(
                loss_probability=v.get("loss", 0.0),
                delay_min_ms=v.get("delay_min_ms", 0),
                delay_max_ms=v.get("delay_max_ms", v.get("delay_min_ms", 0)),
                duplicate_probability=v.get("duplicate", 0.0),
                bursts=v.get("bursts", ()),
                cut_at_ms=v.get("cut_at_ms"),
            )
        except ValueError as exc:
            raise ScenarioError(line, f"[channel.{name}]: {exc}") from None

    def _policy(self) -> Optional[LossPolicy]:
        if "policy" not in self.sections:
            return None
        try:
            return LossPolicy(
                threshold=self.get("policy", "threshold", 0.3),
                window_ms=self.get("policy", "window_ms", self.get("", "interval_ms", 1000)),
                action=self.get("policy", "action", PolicyAction.NOTIFY),
            )
        except ValueError as exc:
            raise ScenarioError(self.line_of("policy", "threshold"), str(exc)) from None

    def bilateral(self) -> BilateralConfig:
        if self.kind != "bilateral":
            raise ScenarioError(self.line_of("", "kind"), "scenario describes a conference")
        media = self._channel("media") or DEFAULT_CHANNEL
        values = dict(
            duration_ms=self.get("", "duration_ms"),
            interval_ms=self.get("", "interval_ms"),
            seed=self.get("", "seed"),
            epoch_ms=self.get("", "epoch_ms"),
            packets_per_second=self.get("stream", "packets_per_second"),
            payload_bytes=self.get("stream", "payload_bytes"),
            silence_a=self.get("stream", "silence_a"),
            silence_b=self.get("stream", "silence_b"),
            clock_skew_ppm_a=self.get("stream", "clock_skew_ppm_a"),
            media_ab=self._channel("media_ab") or media,
            media_ba=self._channel("media_ba") or media,
            signaling=self._channel("signaling"),
            policy=self._policy(),
            tsa1_available=self.get("tsa", "t1_available"),
            tsa2_available=self.get("tsa", "t2_available"),
            t2_skew_ms=self.get("tsa", "t2_skew_ms"),
        )
        return BilateralConfig(**{k: v for k, v in values.items() if v is not None})

    def conference(self) -> ConferenceScenario:
        if self.kind != "conference":
            raise ScenarioError(self.line_of("", "kind"), "scenario describes a bilateral call")
        changes = []
        for block in self.changes:
            line = min(l for _, l in block.values())
            try:
                changes.append(MembershipChange(block["at_ms"][0], block["kind"][0], block["participant"][0]))
            except KeyError as exc:
                raise ScenarioError(line, f"[change] lacks {exc.args[0]}") from None
            except ValueError as exc:
                raise ScenarioError(line, str(exc)) from None
        values = dict(
            participants=self.get("", "participants"),
            duration_ms=self.get("", "duration_ms"),
            interval_ms=self.get("", "interval_ms"),
            seed=self.get("", "seed"),
            epoch_ms=self.get("", "epoch_ms"),
            packets_per_second=self.get("stream", "packets_per_second"),
            payload_bytes=self.get("stream", "payload_bytes"),
            media=self._channel("media"),
            signaling=self._channel("signaling"),
            changes=tuple(sorted(changes, key=lambda c: c.time_ms)),
        )
        return ConferenceScenario(**{k: v for k, v in values.items() if v is not None})

    def config(self) -> Union[BilateralConfig, ConferenceScenario]:
        return self.bilateral() if self.kind == "bilateral" else self.conference()


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    scenario = Scenario(source=source)
    section = ""
    current = scenario.sections.setdefault("", {})
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError(number, f"unterminated section header {line!r}")
            section = line[1:-1].strip()
            family, _, name = section.partition(".")
            if family not in SECTION_KEYS or (family == "channel") != bool(name) or (name and name not in CHANNELS):
                raise ScenarioError(number, f"unknown section [{section}]")
            if family == "change":
                current = {}
                scenario.changes.append(current)
            elif section in scenario.sections:
                raise ScenarioError(number, f"section [{section}] appears twice")
            else:
                current = scenario.sections.setdefault(section, {})
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ScenarioError(number, f"expected 'key = value', found {line!r}")
        family = section.partition(".")[0]
        schema = SESSION_KEYS if not section else SECTION_KEYS[family]
        if key not in schema:
            where = f"[{section}]" if section else "the session block"
            raise ScenarioError(number, f"unknown key {key!r} in {where}")
        if key in current:
            raise ScenarioError(number, f"duplicate key {key!r}")
        try:
            parsed = schema[key](value)
        except ValueError as exc:
            raise ScenarioError(number, f"bad value for {key}: {exc}") from None
        if not section and key == "kind" and parsed not in KINDS:
            raise ScenarioError(number, f"kind must be one of {', '.join(KINDS)}")
        current[key] = (parsed, number)
    return scenario


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))
