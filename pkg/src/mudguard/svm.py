"""Secondary Virtual Manufacturer: owner domains for P2P whitelisting.

The mapping service owns a parent domain, hands each account a random
sub-domain, and keeps that sub-domain's A record pointing at wherever the
owner's app device (IAD) currently is. It also acts as the "manufacturer"
behind the sign-up MUD URL, gated by a two-factor confirmation.
"""

from __future__ import annotations

import enum
import json
import random
import string
from dataclasses import dataclass, field
from typing import Callable
from urllib.parse import urlsplit

from .dns import DnsZone, update_record
from .errors import (
    InactiveAccount,
    MudFetchFailed,
    NotOnLan,
    TwoFactorFailed,
    TwoFactorTimeout,
)
from .mud import AclEntry, Direction, MudProfile, profile_id_for, serialize_mud
from .net import TCP

LABEL_ALPHABET = string.ascii_lowercase + "234567"


class AccountState(str, enum.Enum):
    CREATED = "created"
    PENDING_TWO_FACTOR = "pending_two_factor"
    ACTIVE = "active"


@dataclass(frozen=True)
class ReportMetadata:
    account_id: str
    unique_subdomain: str
    external_ip: str
    internal_ip: str
    ts: int
    client_id: str = "iad"

    def to_json(self) -> str:
        return json.dumps(
            {
                "account_id": self.account_id,
                "subdomain": self.unique_subdomain,
                "ext_ip": self.external_ip,
                "int_ip": self.internal_ip,
                "ts": self.ts,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str, client_id: str = "iad") -> ReportMetadata:
        d = json.loads(text)
        missing = {"account_id", "subdomain", "ext_ip", "int_ip", "ts"} - d.keys()
        if missing:
            raise ValueError(f"report lacks {sorted(missing)}")
        return cls(d["account_id"], d["subdomain"], d["ext_ip"], d["int_ip"], int(d["ts"]), client_id)


@dataclass
class SvmAccount:
    account_id: str
    unique_subdomain: str
    email: str | None = None
    phone: str | None = None
    state: AccountState = AccountState.CREATED
    challenge: str | None = None
    failed_attempts: int = 0
    bound_customer: str | None = None
    last_report: ReportMetadata | None = None
    iad_addrs: dict[str, tuple[str, str]] = field(default_factory=dict)

    @property
    def contact(self) -> str:
        return self.email or self.phone


class OutOfBandChannel:
    """Stand-in for email/SMS. ``responders`` play the human reading the code."""

    def __init__(self):
        self.outbox: list[tuple[str, str]] = []
        self.responders: dict[str, Callable[[str, int], str | None]] = {}

    def deliver(self, contact: str, code: str) -> None:
        self.outbox.append((contact, code))

    def last_code(self, contact: str) -> str | None:
        for c, code in reversed(self.outbox):
            if c == contact:
                return code
        return None

    def respond(self, contact: str, attempt: int) -> str | None:
        responder = self.responders.get(contact)
        if responder is None:
            return None
        return responder(contact, attempt)

    def honest_user(self, contact: str) -> None:
        self.responders[contact] = lambda c, attempt: self.last_code(c)


@dataclass(frozen=True)
class DnsUpdated:
    names: tuple[str, ...]


@dataclass(frozen=True)
class NoChange:
    pass


class MappingService:
    AUTHORITY = "svm"

    def __init__(
        self,
        zone: DnsZone,
        *,
        rng: random.Random | None = None,
        channel: OutOfBandChannel | None = None,
        dual_records: bool = False,
        max_attempts: int = 3,
        ttl: int = 30,
    ):
        self.zone = zone
        self.parent = zone.origin
        self.rng = rng or random.Random(0)
        self.channel = channel or OutOfBandChannel()
        self.dual_records = dual_records
        self.max_attempts = max_attempts
        self.ttl = ttl
        self.accounts: dict[str, SvmAccount] = {}
        self._by_subdomain: dict[str, str] = {}
        self.reports: list[ReportMetadata] = []

    # -- accounts ------------------------------------------------------------------

    def _label(self, n: int) -> str:
        return "".join(self.rng.choice(LABEL_ALPHABET) for _ in range(n))

    def create_account(self, email: str | None = None, phone: str | None = None) -> SvmAccount:
        if not (email or phone):
            raise ValueError("an email address or phone number is required")
        while True:
            sub = f"{self._label(8)}.{self.parent}"
            if sub not in self._by_subdomain:
                break
        account_id = "acct-" + "".join(self.rng.choice("0123456789abcdef") for _ in range(10))
        acct = SvmAccount(account_id, sub, email, phone)
        self.accounts[account_id] = acct
        self._by_subdomain[sub] = account_id
        return acct

    def mud_url(self, account: SvmAccount) -> str:
        return f"https://{self.parent}/mud/{account.account_id}"

    def internal_name(self, account: SvmAccount) -> str:
        label = account.unique_subdomain.split(".", 1)[0]
        return f"{label}.int.{self.parent}"

    def reset_two_factor(self, account_id: str) -> None:
        acct = self.accounts[account_id]
        if acct.state is AccountState.PENDING_TWO_FACTOR:
            acct.state = AccountState.CREATED
            acct.challenge = None
            acct.failed_attempts = 0

    # -- sign-up -----------------------------------------------------------------------

    def _two_factor(self, acct: SvmAccount) -> None:
        if acct.state is AccountState.PENDING_TWO_FACTOR and acct.failed_attempts >= self.max_attempts:
            raise TwoFactorFailed(acct.account_id)
        acct.state = AccountState.PENDING_TWO_FACTOR
        acct.challenge = f"{self.rng.randrange(10**6):06d}"
        acct.failed_attempts = 0
        self.channel.deliver(acct.contact, acct.challenge)
        for attempt in range(1, self.max_attempts + 1):
            typed = self.channel.respond(acct.contact, attempt)
            if typed is None:
                raise TwoFactorTimeout(acct.account_id)
            if typed == acct.challenge:
                acct.state = AccountState.ACTIVE
                acct.challenge = None
                return
            acct.failed_attempts += 1
        raise TwoFactorFailed(acct.account_id)

    def owner_mud(self, acct: SvmAccount) -> bytes:
        entries = {AclEntry(dns_name=acct.unique_subdomain, protocol=TCP, direction=Direction.CLOUD_TO_DEVICE)}
        if self.dual_records:
            entries.add(
                AclEntry(dns_name=self.internal_name(acct), protocol=TCP, direction=Direction.CLOUD_TO_DEVICE)
            )
        url = self.mud_url(acct)
        profile = MudProfile(profile_id_for(url), url, frozenset(entries), systeminfo="SVM owner domain")
        return serialize_mud(profile)

    def serve_mud(self, url: str, requester: str) -> bytes:
        """Answer a MUD fetch for ``https://<parent>/mud/<account_id>``."""
        parts = urlsplit(url)
        prefix = "/mud/"
        if parts.hostname != self.parent or not parts.path.startswith(prefix):
            raise MudFetchFailed(f"{url}: not an SVM MUD URL")
        acct = self.accounts.get(parts.path[len(prefix):])
        if acct is None:
            raise MudFetchFailed(f"{url}: unknown account")
        if acct.state is not AccountState.ACTIVE or acct.bound_customer != requester:
            self._two_factor(acct)
            acct.bound_customer = requester
        return self.owner_mud(acct)

    # -- steady state ---------------------------------------------------------------

    def receive_report(self, report: ReportMetadata) -> DnsUpdated | NoChange:
        acct = self.accounts.get(report.account_id)
        if acct is None or acct.state is not AccountState.ACTIVE:
            raise InactiveAccount(report.account_id)
        if report.unique_subdomain != acct.unique_subdomain:
            raise ValueError("report names a different sub-domain")
        self.reports.append(report)
        previous = acct.iad_addrs.get(report.client_id)
        acct.last_report = report
        acct.iad_addrs[report.client_id] = (report.external_ip, report.internal_ip)
        if previous == (report.external_ip, report.internal_ip):
            return NoChange()
        names = []
        ext = {e for e, _ in acct.iad_addrs.values()}
        update_record(self.zone, acct.unique_subdomain, ext, caller=self.AUTHORITY, ttl=self.ttl)
        names.append(acct.unique_subdomain)
        if self.dual_records:
            internal = {i for _, i in acct.iad_addrs.values()}
            update_record(self.zone, self.internal_name(acct), internal, caller=self.AUTHORITY, ttl=self.ttl)
            names.append(self.internal_name(acct))
        return DnsUpdated(tuple(names))


@dataclass
class Attachment:
    external_ip: str
    internal_ip: str
    cpe_id: str | None = None  # None: not behind a monitored CPE (cellular etc.)


class TrackingClient:
    """The tracking app on the IAD."""

    def __init__(
        self,
        account: SvmAccount,
        mac: str,
        attachment: Attachment,
        *,
        client_id: str = "iad",
        report_interval: int = 15,
    ):
        self.account = account
        self.mac = mac.lower()
        self.current_network = attachment
        self.client_id = client_id
        self.report_interval = report_interval
        self.last_report_ts: int | None = None
        self.last_reported: tuple[str, str] | None = None

    def move(self, external_ip: str, internal_ip: str, cpe_id: str | None = None) -> None:
        self.current_network = Attachment(external_ip, internal_ip, cpe_id)

    def due(self, now: int) -> bool:
        net = self.current_network
        if self.last_reported != (net.external_ip, net.internal_ip):
            return True
        return self.last_report_ts is None or now - self.last_report_ts >= self.report_interval

    def make_report(self, now: int) -> ReportMetadata:
        net = self.current_network
        return ReportMetadata(
            self.account.account_id, self.account.unique_subdomain,
            net.external_ip, net.internal_ip, now, self.client_id,
        )


def report(client: TrackingClient, service: MappingService, now: int) -> DnsUpdated | NoChange:
    if client.account.state is not AccountState.ACTIVE:
        raise InactiveAccount(client.account.account_id)
    msg = client.make_report(now)
    out = service.receive_report(ReportMetadata.from_json(msg.to_json(), client.client_id))
    client.last_report_ts = now
    client.last_reported = (msg.external_ip, msg.internal_ip)
    return out


@dataclass(frozen=True)
class Completed:
    owner_domain: str


@dataclass(frozen=True)
class Rejected:
    reason: str


def signup_flow(client: TrackingClient, cpe, controller, service: MappingService) -> Completed | Rejected:
    """Sign ``client`` up as the owner of the devices behind ``cpe``.

    Raises NotOnLan, TwoFactorFailed or TwoFactorTimeout; returns Rejected
    when the CPE is not monitored at all.
    """
    if client.current_network.cpe_id != cpe.cpe_id:
        raise NotOnLan(f"{client.mac} is not attached behind {cpe.cpe_id}")
    customer_id = controller.customer_for_cpe(cpe.cpe_id)
    if customer_id is None:
        return Rejected("cpe not monitored")
    url = service.mud_url(client.account)
    # DHCP carries the MUD URL; the join notification drives the rest
    if client.mac in cpe.hosts:
        cpe.hosts[client.mac].mud_url = url
        cpe.connect_device(client.mac)
        controller.retry_mud(customer_id, client.mac)
    else:
        cpe.connect_device(client.mac, "iad", "wireless", mud_url=url)
    cust = controller.customer(customer_id)
    err = cust.signup_errors.get(client.mac)
    if err is not None:
        raise err
    if cust.owner_domain != client.account.unique_subdomain:
        return Rejected("owner domain not installed")
    return Completed(cust.owner_domain)
