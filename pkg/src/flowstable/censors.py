"""Middlebox models: match sensitive traffic at a node and act on it.

Rules are attached to topology nodes. An active rule fires on sensitive
payload packets whose application protocol and domain match; it then
either injects a response back toward the source (DNS answer, TCP RST,
blockpage) or silently swallows the packet. Control traffic never
triggers a rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from .core import AppProtocol, FlowId, Packet, PacketKind, Sensitivity


class UnknownRuleError(LookupError):
    """A censor-rule reference does not exist in the topology."""


class Direction(Enum):
    TOWARD_DESTINATION = "toward_destination"
    BIDIRECTIONAL = "bidirectional"


class Health(Enum):
    ACTIVE = "active"
    FAILED = "failed"


class ActionKind(Enum):
    INJECT_DNS_ANSWER = "inject_dns_answer"
    INJECT_RST = "inject_rst"
    DROP_SILENTLY = "drop_silently"
    INJECT_BLOCKPAGE = "inject_blockpage"

    @property
    def consumes_packet(self) -> bool:
        """Only silent drops remove the packet from the wire; injections
        race the origin and let the original packet continue."""
        return self is ActionKind.DROP_SILENTLY


#: Application protocols each action kind is valid for.
_VALID_ACTIONS = {
    ActionKind.INJECT_DNS_ANSWER: {AppProtocol.DNS},
    ActionKind.INJECT_BLOCKPAGE: {AppProtocol.HTTP},
    ActionKind.INJECT_RST: {AppProtocol.HTTP, AppProtocol.HTTPS},
    ActionKind.DROP_SILENTLY: {AppProtocol.HTTP, AppProtocol.HTTPS},
}


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    tag: str = ""

    def __post_init__(self) -> None:
        needs_tag = self.kind in (ActionKind.INJECT_DNS_ANSWER, ActionKind.INJECT_BLOCKPAGE)
        if needs_tag and not self.tag:
            raise ValueError(f"{self.kind.value} requires a tag")
        if not needs_tag and self.tag:
            raise ValueError(f"{self.kind.value} takes no tag")


@dataclass(frozen=True)
class CensorEvent:
    """Ground-truth record of one fired action."""

    at: int
    action: Action
    epoch: int
    flow: FlowId


def domain_matches(pattern: str, domain: str) -> bool:
    """Exact match, or suffix match for patterns written as ``*.suffix``
    (which also matches the bare suffix)."""
    if pattern.startswith("*."):
        suffix = pattern[2:]
        return domain == suffix or domain.endswith("." + suffix)
    return domain == pattern


@dataclass
class CensorRule:
    """One middlebox rule attached at a node.

    Health changes are scheduled by epoch so flips can be installed up
    front and applied deterministically between epochs. residual_epochs
    > 0 opts into residual censorship: after a hit, any packet on the
    same flow within the window is actioned too.
    """

    attach_at: int
    protocol: AppProtocol
    direction: Direction
    domain_pattern: str
    action: Action
    health: Health = Health.ACTIVE
    residual_epochs: int = 0
    _health_schedule: List[Tuple[int, Health]] = field(default_factory=list, repr=False)
    _residual_until: Dict[bytes, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.protocol not in _VALID_ACTIONS[self.action.kind]:
            raise ValueError(
                f"action {self.action.kind.value} not valid for {self.protocol.value}"
            )
        if self.residual_epochs < 0:
            raise ValueError("residual_epochs must be >= 0")

    def health_at(self, epoch: int) -> Health:
        current = self.health
        for when, state in self._health_schedule:
            if when <= epoch:
                current = state
        return current

    def schedule_health(self, health: Health, epoch: int) -> None:
        self._health_schedule.append((epoch, health))
        self._health_schedule.sort(key=lambda e: e[0])

    def matches(self, packet: Packet) -> bool:
        if packet.sensitivity is not Sensitivity.SENSITIVE:
            return False
        if packet.kind not in (PacketKind.TCP_PAYLOAD, PacketKind.UDP_PAYLOAD):
            return False
        # Both directions trigger on probes headed toward the destination;
        # the reverse path is not simulated.
        if self.protocol.transport is not packet.flow.protocol:
            return False
        if packet.flow.dst_port != self.protocol.port:
            return False
        return domain_matches(self.domain_pattern, packet.body_tag)


def apply(rule: CensorRule, packet: Packet, epoch: int) -> Optional[CensorEvent]:
    """Fire the rule on a transiting packet, or return None.

    A failed rule never fires, including for residual state. On a fresh
    match with residual_epochs > 0 the flow is remembered and later
    packets on it inside the window are actioned regardless of content.
    """
    if rule.health_at(epoch) is not Health.FAILED:
        key = packet.flow.to_bytes()
        residual = rule._residual_until.get(key)
        if residual is not None and epoch <= residual:
            return CensorEvent(rule.attach_at, rule.action, epoch, packet.flow)
        if rule.matches(packet):
            if rule.residual_epochs > 0:
                rule._residual_until[key] = epoch + rule.residual_epochs
            return CensorEvent(rule.attach_at, rule.action, epoch, packet.flow)
    return None


def set_health(rules: List[CensorRule], index: int, health: Health, epoch: int) -> CensorRule:
    """Schedule a health change for rule `index`, effective at `epoch`."""
    if not 0 <= index < len(rules):
        raise UnknownRuleError(f"no censor rule at index {index}")
    rule = rules[index]
    rule.schedule_health(health, epoch)
    return rule
