from hypothesis import given, strategies as st

from mudguard.net import (
    COMMON_DSCP,
    DEFAULT_MARK,
    PASS_MARK,
    ConnKey,
    DscpKind,
    Packet,
    PayloadKind,
    allocatable_marks,
    allocate_mark,
    classify_dscp,
    reverse,
)

import pytest

ipv4 = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
ports = st.integers(0, 65535)
macs = st.lists(st.integers(0, 255), min_size=6, max_size=6).map(lambda b: ":".join(f"{x:02x}" for x in b))
label = st.text("abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=10)
qnames = st.lists(label, min_size=2, max_size=4).map(".".join)


def test_common_dscp_table():
    # CS0-CS7, AF11..AF43, EF
    cs = {8 * i for i in range(8)}
    af = {8 * c + 2 * d for c in range(1, 5) for d in range(1, 4)}
    assert COMMON_DSCP == frozenset(cs | af | {46})
    assert len(COMMON_DSCP) == 21


def test_classify_examples():
    assert classify_dscp(0).kind is DscpKind.COMMONLY_USED
    assert classify_dscp(46).kind is DscpKind.COMMONLY_USED
    assert classify_dscp(DEFAULT_MARK).kind is DscpKind.DEFAULT_MARK
    assert classify_dscp(1).kind is DscpKind.DEVICE_MARK
    with pytest.raises(ValueError):
        classify_dscp(64)


def test_allocatable_marks_exclude_reserved():
    marks = allocatable_marks()
    assert len(marks) == 64 - 21 - 2
    assert DEFAULT_MARK not in marks and PASS_MARK not in marks
    assert not set(marks) & COMMON_DSCP


def test_allocate_mark_smallest_free_and_exhaustion():
    assert allocate_mark(set()) == 1
    assert allocate_mark({1, 2}) == 3
    assert allocate_mark(set(allocatable_marks())) is None


@given(ipv4, ports, ipv4, ports, st.sampled_from([6, 17]))
def test_reverse_is_an_involution(a, sp, b, dp, proto):
    k = ConnKey(a, sp, b, dp, proto)
    assert reverse(reverse(k)) == k
    assert k.reverse() == ConnKey(b, dp, a, sp, proto)


@given(
    ipv4, ipv4, ports, ports, st.sampled_from([6, 17]), st.integers(0, 63),
    st.none() | macs, st.integers(0, 10**6), st.none() | qnames,
    st.lists(ipv4, min_size=1, max_size=3),
)
def test_trace_line_roundtrip(src, dst, sp, dp, proto, dscp, mac, ts, qname, answers):
    if qname is None:
        p = Packet(src, dst, sp, dp, proto, dscp, mac, ts=ts)
    else:
        p = Packet(src, dst, sp, dp, proto, dscp, mac, PayloadKind.DNS_RESPONSE, qname, tuple(answers), ts)
    assert Packet.decode(p.encode()) == p


def test_packet_validation():
    with pytest.raises(ValueError):
        Packet("10.0.0.1", "10.0.0.2", 1, 2, 6, dscp=64)
    with pytest.raises(ValueError):
        Packet("10.0.0.1", "10.0.0.2", 1, 70000, 6)
    with pytest.raises(ValueError):
        Packet("10.0.0.1", "10.0.0.2", 1, 2, 17, kind=PayloadKind.DNS_QUERY)
    with pytest.raises(ValueError):
        Packet.decode("1 - 10.0.0.1 1 10.0.0.300 2 6 0 data")


def test_trace_line_format():
    p = Packet("192.168.1.100", "192.0.2.53", 5353, 53, 17, 4, "02:00:00:00:01:01",
               PayloadKind.DNS_QUERY, "api.camco.example", ts=7)
    assert p.encode() == "7 02:00:00:00:01:01 192.168.1.100 5353 192.0.2.53 53 17 4 dns_query:api.camco.example"
