import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np
import pytest

from amcr.backends import (
    DeterministicTestEncoder,
    LinearPatchEncoder,
    RemoteSlotProvider,
    RemoteTextEncoder,
    RetryPolicy,
    StaticCandidateTable,
    remote_embed,
)
from amcr.errors import (
    ConsistencyError,
    DimensionDriftError,
    ProtocolError,
    ProviderError,
    ProviderTimeout,
    ProviderUnavailable,
)

NO_WAIT = RetryPolicy(attempts=3, backoff=0.0)


def test_deterministic_encoder_is_stable_and_unit():
    a = DeterministicTestEncoder(seed=7, dim=16)
    b = DeterministicTestEncoder(seed=7, dim=16)
    va = a.embed(["Red Cap", "blue overalls"])
    np.testing.assert_array_equal(va, b.embed(["red cap", "Blue  Overalls"]))
    np.testing.assert_allclose(np.linalg.norm(va, axis=1), 1.0)
    assert not np.allclose(va[0], DeterministicTestEncoder(seed=8, dim=16).embed_one("red cap"))
    assert a.embed([]).shape == (0, 16)


def test_planted_vectors_and_vocabulary():
    enc = DeterministicTestEncoder.from_vocabulary({"axes": ["x", "y"], "phrases": {"p": {"x": 3, "y": 4}}}, dim=4)
    np.testing.assert_allclose(enc.embed_one("P"), [0.6, 0.8, 0, 0])
    assert "planted=" in enc.id
    with pytest.raises(ConsistencyError):
        DeterministicTestEncoder(dim=3, planted={"p": [1.0, 0.0]})
    with pytest.raises(ConsistencyError):
        DeterministicTestEncoder.from_vocabulary({"axes": ["a", "b", "c"], "phrases": {}}, dim=2)


def test_static_candidate_table_is_ordered():
    table = StaticCandidateTable({"subject": {"tiger": ["big cat", "house cat"]}})
    assert table.candidates("Tiger", "subject") == ["big cat", "house cat"]
    assert table.candidates("tiger", "scene") == []


def test_patch_encoder_backward_matches_finite_differences():
    enc = LinearPatchEncoder(patch=2, dim=6, channels=1, seed=3)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((1, 4, 4))
    up = rng.standard_normal((4, 6))
    feats, cache = enc.forward(z)
    np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0)
    grad = enc.backward(cache, up)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num = (np.sum(enc.forward(zp)[0] * up) - np.sum(enc.forward(zm)[0] * up)) / (2 * h)
        assert grad[idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


def mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def vectors_reply(request, dim=3):
    n = len(json.loads(request.content)["texts"])
    return httpx.Response(200, json={"vectors": [[1.0] + [0.0] * (dim - 1)] * n})


def test_remote_embed_retries_on_5xx_and_timeout():
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            return httpx.Response(503)
        if len(calls) == 2:
            raise httpx.ReadTimeout("slow", request=request)
        return vectors_reply(request)

    delays = []
    out = remote_embed(["a", "b"], "http://svc/embed", dim=3, retry=NO_WAIT, client=mock_client(handler), sleep=delays.append)
    assert out.shape == (2, 3) and len(calls) == 3 and len(delays) == 2


def test_remote_embed_gives_up():
    with pytest.raises(ProviderUnavailable):
        remote_embed(["a"], "http://svc", retry=NO_WAIT, client=mock_client(lambda r: httpx.Response(500)), sleep=lambda s: None)

    def slow(request):
        raise httpx.ConnectTimeout("x", request=request)

    with pytest.raises(ProviderTimeout):
        remote_embed(["a"], "http://svc", retry=NO_WAIT, client=mock_client(slow), sleep=lambda s: None)


@pytest.mark.parametrize(
    "reply, exc",
    [
        (lambda r: httpx.Response(400, text="bad"), ProtocolError),
        (lambda r: httpx.Response(200, json={"vectors": [[1.0, 0.0, 0.0]] * 5}), ProtocolError),
        (lambda r: httpx.Response(200, text="not json"), ProtocolError),
        (lambda r: httpx.Response(200, json={"vectors": [[0.0, 0.0, 0.0]]}), ProtocolError),
        (lambda r: vectors_reply(r, dim=4), DimensionDriftError),
    ],
)
def test_remote_embed_protocol_errors(reply, exc):
    calls = []

    def handler(request):
        calls.append(1)
        return reply(request)

    with pytest.raises(exc):
        remote_embed(["a"], "http://svc", dim=3, retry=NO_WAIT, client=mock_client(handler), sleep=lambda s: None)
    assert len(calls) == 1


def test_retry_policy_backoff_is_capped():
    p = RetryPolicy(attempts=5, backoff=0.5, cap=1.5)
    assert [p.delay(i) for i in range(4)] == [0.5, 1.0, 1.5, 1.5]


class _Server:
    def __init__(self, respond):
        seen = self.seen = []

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                seen.append((self.path, dict(self.headers), body))
                status, payload = respond(self.path, body)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server():
    def respond(path, body):
        if path == "/embed":
            return 200, {"vectors": [[3.0, 4.0]] * len(body["texts"])}
        if path == "/slots":
            return 200, {"slots": {"subject": ["tiger"]}, "echo": body["prompt"]}
        return 404, {}

    s = _Server(respond)
    yield s
    s.close()


def test_remote_encoder_over_http(server):
    enc = RemoteTextEncoder(server.url + "/embed", dim=2, timeout=5, token="s3cret")
    out = enc.embed(["x", "y"])
    np.testing.assert_allclose(out, [[0.6, 0.8]] * 2)
    path, headers, body = server.seen[0]
    assert headers["Authorization"] == "Bearer s3cret" and body == {"texts": ["x", "y"]}


def test_remote_slot_provider_over_http(server):
    out = RemoteSlotProvider(server.url + "/slots", timeout=5).request({"prompt": "a tiger", "schema": []})
    assert out["echo"] == "a tiger"
    assert "Authorization" not in server.seen[0][1]
    with pytest.raises(ProviderError):
        RemoteSlotProvider(server.url + "/missing", timeout=5).request({"prompt": "x"})


def test_unreachable_slot_provider():
    with pytest.raises(ProviderUnavailable):
        RemoteSlotProvider("http://127.0.0.1:9/slots", timeout=1).request({"prompt": "x"})
