import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_slice
from reshard.errors import BadRange, ConnectionFailed, MalformedFrame, NotFound, UnknownVerb
from reshard.store import TensorStore
from reshard.tensor import Dtype, Range, arange, random_tensor, to_ptx
from reshard.transport import (
    Client,
    Request,
    Response,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    framing_overhead,
    serve,
)


def test_header_text():
    req = Request("QUERY", "/2/embedding/weight", "[:,2:4]")
    assert req.header() == "QUERY /2/embedding/weight range=[:,2:4]"
    raw = encode_request(req)
    (hlen,) = struct.unpack_from("<I", raw)
    assert raw[4:4 + hlen] == b"QUERY /2/embedding/weight range=[:,2:4]"
    assert raw[4 + hlen:] == struct.pack("<Q", 0)


class TestCodec:
    def test_truncated(self):
        raw = encode_request(Request("UPLOAD", "/a", None, b"xyz"))
        for cut in (0, 3, 6, len(raw) - 1):
            with pytest.raises(MalformedFrame):
                decode_request(raw[:cut])

    def test_trailing(self):
        with pytest.raises(MalformedFrame):
            decode_request(encode_request(Request("LIST", "/a")) + b"\0")

    def test_unknown_verb(self):
        h = b"FETCH /a"
        raw = struct.pack("<I", len(h)) + h + struct.pack("<Q", 0)
        with pytest.raises(UnknownVerb):
            decode_request(raw)

    def test_payload_rules(self):
        with pytest.raises(MalformedFrame):
            Request("UPLOAD", "/a")
        with pytest.raises(MalformedFrame):
            Request("QUERY", "/a", None, b"x")

    def test_response_detail(self):
        r = Response("NOT_FOUND", None, "no tensor at /x")
        assert decode_response(encode_response(r)) == r


paths = st.lists(st.from_regex(r"[A-Za-z0-9_.\-]{1,8}", fullmatch=True), min_size=1, max_size=4).map(
    lambda segs: "/" + "/".join(segs))
bound = st.one_of(st.none(), st.integers(0, 2**40))
specs = st.one_of(st.none(), st.lists(st.tuples(bound, bound), min_size=1, max_size=4).map(tuple))


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(["QUERY", "LIST", "UPLOAD"]), paths, specs, st.binary(min_size=1, max_size=64))
def test_request_round_trip(verb, path, spec, payload):
    req = Request(verb, path, spec if verb != "UPLOAD" else None, payload if verb == "UPLOAD" else None)
    assert decode_request(encode_request(req)) == req


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["OK", "NOT_FOUND", "BAD_RANGE", "ERROR"]), st.one_of(st.none(), st.binary(max_size=64)),
       st.text(alphabet=st.characters(blacklist_characters="\n\r", blacklist_categories=("Cs",)), max_size=20))
def test_response_round_trip(status, payload, detail):
    detail = detail.strip()
    resp = Response(status, payload, detail)
    assert decode_response(encode_response(resp)) == resp


@pytest.fixture(params=["tcp", "inproc"])
def peer(request):
    store = TensorStore("peer")
    lst = serve(store, "tcp://127.0.0.1:0" if request.param == "tcp" else f"inproc://test-{id(store)}")
    yield store, lst.endpoint
    lst.close()


class TestConformance:
    def test_loopback_equals_local(self, peer):
        store, ep = peer
        t = arange((4, 6))
        store.upload("/2/embedding/weight", t)
        c = Client()
        assert c.fetch(ep, "/2/embedding/weight") == store.query("/2/embedding/weight")
        got = c.fetch(ep, "/2/embedding/weight", "[:,2:4]")
        assert got == naive_slice(t, Range.of((0, 4), (2, 4)))

    def test_range_moves_fewer_bytes(self, peer):
        store, ep = peer
        store.upload("/w", arange((8, 8)))
        full, part = Client(), Client()
        full.fetch(ep, "/w")
        part.fetch(ep, "/w", "[0:2,:]")
        assert part.payload_bytes < full.payload_bytes
        assert part.payload_bytes == 2 * 8 * 4

    def test_wire_accounting(self, peer):
        store, ep = peer
        store.upload("/w", arange((3, 5)))
        c = Client()
        req = Request("QUERY", "/w", "[1:3,:]")
        t = c.fetch(ep, "/w", "[1:3,:]")
        assert c.wire_bytes == t.nbytes + framing_overhead(req, 2)

    def test_errors(self, peer):
        store, ep = peer
        store.upload("/w", arange((4,)))
        c = Client()
        with pytest.raises(NotFound):
            c.fetch(ep, "/missing")
        with pytest.raises(BadRange):
            c.fetch(ep, "/w", "[2:9]")
        with pytest.raises(BadRange):
            c.fetch(ep, "/w", "[:,:]")

    def test_upload_and_list(self, peer):
        store, ep = peer
        c = Client()
        v1 = c.upload(ep, "/2/embedding/weight", arange((2,)))
        v2 = c.upload(ep, "/2/embedding/weight", arange((3,)))
        assert v2 == v1 + 1
        assert c.list(ep, "/2") == ["embedding/weight"]
        assert c.list(ep, "/9") == []
        assert store.query("/2/embedding/weight") == arange((3,))

    def test_malformed_upload_is_an_error_status(self, peer):
        _, ep = peer
        resp, _ = Client().request(ep, Request("UPLOAD", "/x", None, b"not a tensor"))
        assert resp.status == "ERROR" and "MalformedTensor" in resp.detail

    def test_concurrent_readers(self, peer):
        store, ep = peer
        t = random_tensor((16, 16), Dtype.F32, np.random.default_rng(0))
        store.upload("/t", t)
        c = Client()
        errors = []

        def work(k):
            r = Range.of((k, k + 1), (0, 16))
            if c.fetch(ep, "/t", r) != naive_slice(t, r):
                errors.append(k)

        threads = [threading.Thread(target=work, args=(k,)) for k in range(16)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert not errors and c.requests == 16

    def test_versions_monotone_under_interleaving(self, peer):
        store, ep = peer
        c = Client()
        c.upload(ep, "/v", arange((4,)))
        seen = []
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                c.fetch(ep, "/v")
                seen.append(store.version("/v"))

        th = threading.Thread(target=reader)
        th.start()
        versions = [c.upload(ep, "/v", arange((4,), Dtype.I64 if i % 2 else Dtype.F32)) for i in range(30)]
        stop.set()
        th.join()
        assert versions == sorted(versions) and len(set(versions)) == 30
        assert seen == sorted(seen)


def test_peer_down_retries_then_fails():
    c = Client(retries=3, backoff=0.05)
    t0 = time.perf_counter()
    with pytest.raises(ConnectionFailed, match="3 attempts"):
        c.fetch("inproc://nobody-home", "/x")
    assert time.perf_counter() - t0 >= 0.1


def test_retry_succeeds_when_peer_appears():
    store = TensorStore()
    store.upload("/x", arange((2,)))
    holder = {}

    def late_bind():
        time.sleep(0.05)
        holder["l"] = serve(store, "inproc://late-peer")

    th = threading.Thread(target=late_bind)
    th.start()
    try:
        assert Client(retries=3, backoff=0.1).fetch("inproc://late-peer", "/x") == arange((2,))
    finally:
        th.join()
        holder["l"].close()


def test_bytes_payload_is_ptx():
    store = TensorStore()
    store.upload("/t", arange((2, 2)))
    from reshard.transport import handle

    resp = handle(store, Request("QUERY", "/t"))
    assert resp.status == "OK" and resp.payload == to_ptx(arange((2, 2)))
