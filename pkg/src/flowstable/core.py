"""Domain types shared by every other module.

Everything in here is an immutable value object: addresses, flow
identifiers, packets, probe verdicts. Instances are safe to share
between concurrent workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple


class IcmpPacketError(ValueError):
    """Raised when a flow identity is requested for an ICMP reply.

    ICMP time-exceeded messages travel the reverse path and do not
    belong to the probe flow they quote.
    """


class Protocol(Enum):
    """Transport protocol, numbered per the IP protocol registry."""

    TCP = 6
    UDP = 17


class AppProtocol(Enum):
    """Application protocol of a probe; fixes transport and port."""

    DNS = "dns"
    HTTP = "http"
    HTTPS = "https"

    @property
    def transport(self) -> Protocol:
        return Protocol.UDP if self is AppProtocol.DNS else Protocol.TCP

    @property
    def port(self) -> int:
        return {AppProtocol.DNS: 53, AppProtocol.HTTP: 80, AppProtocol.HTTPS: 443}[self]


#: Ephemeral source-port range planners draw from (inclusive).
EPHEMERAL_PORT_RANGE = (32768, 60999)


@dataclass(frozen=True, order=True)
class Ipv4Address:
    """An IPv4 address held as a 32-bit unsigned integer."""

    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value <= 0xFFFFFFFF:
            raise ValueError(f"address out of range: {self.value}")

    @classmethod
    def parse(cls, dotted: str) -> "Ipv4Address":
        parts = dotted.split(".")
        if len(parts) != 4:
            raise ValueError(f"not a dotted quad: {dotted!r}")
        value = 0
        for part in parts:
            if not part.isdigit() or (len(part) > 1 and part[0] == "0"):
                raise ValueError(f"bad octet {part!r} in {dotted!r}")
            octet = int(part)
            if octet > 255:
                raise ValueError(f"octet out of range in {dotted!r}")
            value = (value << 8) | octet
        return cls(value)

    def __str__(self) -> str:
        v = self.value
        return f"{(v >> 24) & 0xFF}.{(v >> 16) & 0xFF}.{(v >> 8) & 0xFF}.{v & 0xFF}"

    def low_bits(self, n: int) -> int:
        """Value of the n lowest-order bits, 1 <= n <= 8."""
        if not 1 <= n <= 8:
            raise ValueError(f"n must be in 1..8, got {n}")
        return self.value & ((1 << n) - 1)

    @property
    def host_octet(self) -> int:
        return self.value & 0xFF

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(4, "big")


@dataclass(frozen=True, order=True)
class FlowId:
    """The 5-tuple routers hash when picking an ECMP next hop."""

    src_ip: Ipv4Address
    dst_ip: Ipv4Address
    src_port: int
    dst_port: int
    protocol: Protocol

    def __post_init__(self) -> None:
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"port out of range: {port}")

    def to_bytes(self) -> bytes:
        """Canonical 13-byte layout: ips, ports big-endian, protocol number."""
        return struct.pack(
            ">4s4sHHB",
            self.src_ip.to_bytes(),
            self.dst_ip.to_bytes(),
            self.src_port,
            self.dst_port,
            self.protocol.value,
        )


def serialize_flow(flow: FlowId) -> bytes:
    """Canonical byte form of a flow; injective, used as hash input."""
    return flow.to_bytes()


@dataclass(frozen=True, order=True)
class SourceParams:
    """The prober-controlled half of a flow: source IP and port."""

    src_ip: Ipv4Address
    src_port: int

    def __post_init__(self) -> None:
        if not 0 <= self.src_port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.src_port}")

    def __str__(self) -> str:
        return f"{self.src_ip}:{self.src_port}"


class PacketKind(Enum):
    TCP_SYN = "tcp_syn"
    TCP_SYNACK = "tcp_synack"
    TCP_ACK = "tcp_ack"
    TCP_PAYLOAD = "tcp_payload"
    TCP_RST = "tcp_rst"
    UDP_PAYLOAD = "udp_payload"
    ICMP_TTL_EXCEEDED = "icmp_ttl_exceeded"
    DNS_RESPONSE = "dns_response"
    HTTP_RESPONSE = "http_response"


class Sensitivity(Enum):
    CONTROL = "control"
    SENSITIVE = "sensitive"
    NOT_APPLICABLE = "n/a"


@dataclass(frozen=True)
class Packet:
    """One simulated packet.

    body_tag is an opaque label: the probed domain on outgoing payloads,
    a blockpage template id or DNS answer tag on injected responses, and
    the originating node id on ICMP time-exceeded messages.
    """

    flow: FlowId
    ttl: int
    ip_id: int = 0
    kind: PacketKind = PacketKind.TCP_PAYLOAD
    sensitivity: Sensitivity = Sensitivity.NOT_APPLICABLE
    body_tag: str = ""
    quoted: Optional[Tuple[SourceParams, int]] = None

    def __post_init__(self) -> None:
        if not 1 <= self.ttl <= 255:
            raise ValueError(f"ttl out of range: {self.ttl}")
        if not 0 <= self.ip_id <= 0xFFFF:
            raise ValueError(f"ip_id out of range: {self.ip_id}")
        if self.kind is PacketKind.ICMP_TTL_EXCEEDED and self.quoted is None:
            raise ValueError("ICMP time-exceeded packets must quote (source, ip_id)")


def flow_id_of(packet: Packet) -> FlowId:
    """Flow identity of a probe packet; rejects ICMP replies."""
    if packet.kind is PacketKind.ICMP_TTL_EXCEEDED:
        raise IcmpPacketError("ICMP replies have no probe flow identity")
    return packet.flow


class Mechanism(Enum):
    RST_INJECTION = "rst_injection"
    PACKET_DROP = "packet_drop"
    BLOCKPAGE = "blockpage"
    DNS_INJECTION = "dns_injection"


class VerdictKind(Enum):
    CENSORED = "censored"
    NOT_CENSORED = "not_censored"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class Verdict:
    """Conservative outcome for one (destination, source-params) cell."""

    kind: VerdictKind
    mechanism: Optional[Mechanism] = None

    def __post_init__(self) -> None:
        if (self.kind is VerdictKind.CENSORED) != (self.mechanism is not None):
            raise ValueError("mechanism present iff verdict is censored")

    @classmethod
    def censored(cls, mechanism: Mechanism) -> "Verdict":
        return cls(VerdictKind.CENSORED, mechanism)

    @classmethod
    def not_censored(cls) -> "Verdict":
        return cls(VerdictKind.NOT_CENSORED)

    @classmethod
    def excluded(cls) -> "Verdict":
        return cls(VerdictKind.EXCLUDED)

    @property
    def is_censored(self) -> bool:
        return self.kind is VerdictKind.CENSORED

    @property
    def is_not_censored(self) -> bool:
        return self.kind is VerdictKind.NOT_CENSORED

    @property
    def is_excluded(self) -> bool:
        return self.kind is VerdictKind.EXCLUDED
