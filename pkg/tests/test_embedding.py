import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from okh.embedding import (
    EmbeddingCache,
    EmbeddingStore,
    LocalHashingEmbedder,
    RemoteEmbeddingClient,
    compose_text,
    cosine,
    post_json_with_retries,
)
from okh.errors import DimensionMismatch, ProviderError, ZeroNorm
from okh.hypergraph import Entity, Hyperedge
from okh.relations import EntityType


def test_compose_text_layout_is_frozen():
    edge = Hyperedge.create(
        "forecasts_hazard_at_horizon",
        {"port:p", "wind_fcst:IRMA:p:T-48"},
        evidence="gusts expected",
        attributes={"peak_gust_kt": "70", "basis": "model"},
    )
    entities = {
        "port:p": Entity("port:p", "Port P", EntityType.PORT),
        "wind_fcst:IRMA:p:T-48": Entity(
            "wind_fcst:IRMA:p:T-48", "Irma wind fcst", EntityType.HAZARD_FORECAST
        ),
    }
    assert compose_text(edge, entities) == (
        "forecasts_hazard_at_horizon | gusts expected | "
        "Port P [port]; Irma wind fcst [hazard_forecast] | "
        "basis=model; peak_gust_kt=70"
    )


def test_compose_text_handles_missing_entity_and_empty_attributes():
    edge = Hyperedge.create("has_attribute", {"a", "b"}, evidence="ev")
    assert compose_text(edge, {}) == "has_attribute | ev | a [other]; b [other] | "


def test_local_embedder_is_deterministic_unit_norm_f32():
    embedder = LocalHashingEmbedder(dim=64)
    first = embedder.embed_one("the storm approaches the port")
    second = embedder.embed_one("the storm approaches the port")
    assert np.array_equal(first, second)
    assert np.linalg.norm(first) == pytest.approx(1.0, abs=1e-7)
    assert np.array_equal(first, first.astype(np.float32).astype(np.float64))


def test_local_embedder_is_a_bag_of_tokens():
    embedder = LocalHashingEmbedder(dim=64)
    assert np.array_equal(embedder.embed_one("alpha beta"), embedder.embed_one("beta alpha"))
    assert not np.array_equal(embedder.embed_one("alpha beta"), embedder.embed_one("alpha gamma"))


def test_local_embedder_shared_tokens_raise_cosine():
    embedder = LocalHashingEmbedder(dim=256)
    query = embedder.embed_one("storm surge at port arthur")
    near = embedder.embed_one("storm surge flooding port arthur docks")
    far = embedder.embed_one("quarterly earnings call transcript summary")
    assert cosine(query, near) > cosine(query, far)


def test_local_embedder_rejects_tiny_dimension():
    with pytest.raises(ValueError):
        LocalHashingEmbedder(dim=4)


def test_local_embedder_empty_text_hits_fallback_basis():
    vector = LocalHashingEmbedder(dim=16).embed_one("")
    expected = np.zeros(16)
    expected[0] = 1.0
    assert np.array_equal(vector, expected)


def test_embed_stacks_rows():
    embedder = LocalHashingEmbedder(dim=32)
    matrix = embedder.embed(["a", "b", "c"])
    assert matrix.shape == (3, 32)
    assert np.array_equal(matrix[1], embedder.embed_one("b"))


def test_cosine_basics_and_errors():
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)
    assert cosine(np.array([2.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(1.0)
    with pytest.raises(DimensionMismatch):
        cosine(np.zeros(3), np.zeros(4))
    with pytest.raises(ZeroNorm):
        cosine(np.zeros(3), np.ones(3))


def test_cache_roundtrip_is_bit_exact(tmp_path):
    path = tmp_path / "cache.okhe"
    cache = EmbeddingCache(str(path), dim=16)
    vector = LocalHashingEmbedder(dim=16).embed_one("hello world")
    cache.store("hello world", vector)
    cache.save()

    reloaded = EmbeddingCache(str(path), dim=16)
    hit = reloaded.lookup("hello world")
    assert hit is not None
    assert np.array_equal(hit, vector)
    assert reloaded.lookup("other text") is None


def test_cache_tolerates_missing_and_mismatched_files(tmp_path):
    missing = EmbeddingCache(str(tmp_path / "absent.okhe"), dim=8)
    assert missing.lookup("x") is None

    path = tmp_path / "cache.okhe"
    cache = EmbeddingCache(str(path), dim=16)
    cache.store("x", LocalHashingEmbedder(dim=16).embed_one("x"))
    cache.save()
    other_dim = EmbeddingCache(str(path), dim=32)
    assert other_dim.lookup("x") is None

    path.write_bytes(b"not a cache file")
    garbage = EmbeddingCache(str(path), dim=16)
    assert garbage.lookup("x") is None


class _ScriptedHandler(BaseHTTPRequestHandler):
    script: list[tuple[int, dict]] = []
    requests_seen: list[dict] = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        type(self).requests_seen.append(
            {"path": self.path, "auth": self.headers.get("Authorization"), "body": body}
        )
        status, payload = self.script.pop(0) if self.script else (500, {})
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(json.dumps(payload).encode("utf-8"))

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    server = HTTPServer(("127.0.0.1", 0), _ScriptedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _ScriptedHandler.script = []
    _ScriptedHandler.requests_seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}", _ScriptedHandler
    server.shutdown()
    thread.join()


def test_post_json_success_sends_bearer_key(http_server):
    url, handler = http_server
    handler.script.append((200, {"ok": True}))
    body = post_json_with_retries(f"{url}/x", {"a": 1}, api_key="secret")
    assert body == {"ok": True}
    assert handler.requests_seen[0]["auth"] == "Bearer secret"
    assert handler.requests_seen[0]["body"] == {"a": 1}


def test_post_json_retries_server_errors_then_succeeds(http_server):
    url, handler = http_server
    handler.script.extend([(500, {}), (429, {}), (200, {"ok": 1})])
    body = post_json_with_retries(f"{url}/x", {}, api_key=None, max_attempts=3, backoff=0.001)
    assert body == {"ok": 1}
    assert len(handler.requests_seen) == 3


def test_post_json_client_error_fails_without_retry(http_server):
    url, handler = http_server
    handler.script.append((400, {"error": "bad"}))
    with pytest.raises(ProviderError) as err:
        post_json_with_retries(f"{url}/x", {}, api_key=None, max_attempts=3, backoff=0.001)
    assert err.value.status == 400
    assert len(handler.requests_seen) == 1


def test_post_json_exhausts_attempts(http_server):
    url, handler = http_server
    handler.script.extend([(503, {}), (503, {}), (503, {})])
    with pytest.raises(ProviderError) as err:
        post_json_with_retries(f"{url}/x", {}, api_key=None, max_attempts=3, backoff=0.001)
    assert err.value.status == 503
    assert len(handler.requests_seen) == 3


def _embedding_payload(vectors, order=None):
    indices = order if order is not None else range(len(vectors))
    return {
        "data": [
            {"index": i, "embedding": list(map(float, vec))}
            for i, vec in zip(indices, vectors)
        ]
    }


def test_remote_client_normalizes_and_respects_index_field(http_server):
    url, handler = http_server
    # Response deliberately lists the second text first; index must win.
    handler.script.append(
        (200, _embedding_payload([[0.0, 2.0, 0.0], [4.0, 0.0, 0.0]], order=[1, 0]))
    )
    client = RemoteEmbeddingClient(url, "m", dim=3, api_key="k", backoff=0.001)
    matrix = client.embed(["first", "second"])
    assert matrix.shape == (2, 3)
    assert matrix[0] == pytest.approx([1.0, 0.0, 0.0])
    assert matrix[1] == pytest.approx([0.0, 1.0, 0.0])
    assert handler.requests_seen[0]["body"] == {"model": "m", "input": ["first", "second"]}


def test_remote_client_rejects_dimension_drift(http_server):
    url, handler = http_server
    handler.script.append((200, _embedding_payload([[1.0, 0.0], [1.0, 0.0, 0.0]])))
    client = RemoteEmbeddingClient(url, "m", api_key="k", backoff=0.001)
    with pytest.raises(DimensionMismatch):
        client.embed(["a", "b"])


def test_remote_client_rejects_wrong_count(http_server):
    url, handler = http_server
    handler.script.append((200, _embedding_payload([[1.0, 0.0]])))
    client = RemoteEmbeddingClient(url, "m", dim=2, api_key="k", backoff=0.001)
    with pytest.raises(ProviderError):
        client.embed(["a", "b"])


class _CountingEmbedder:
    def __init__(self, dim=16):
        self.inner = LocalHashingEmbedder(dim)
        self.dim = dim
        self.calls = 0

    def embed(self, texts):
        self.calls += 1
        return self.inner.embed(texts)


def _tiny_graph():
    from okh.hypergraph import merge_facts

    facts = [
        {
            "relation": "forecasts_hazard_at_horizon",
            "entities": [
                {"id": "port:p", "name": "P", "type": "port"},
                {"id": f"wind_fcst:A:p:T-{h}", "name": f"w{h}", "type": "hazard_forecast"},
            ],
            "evidence": f"wind at T-{h}",
            "attributes": {},
            "confidence": 1.0,
            "group": "A:p",
            "horizon": h,
            "text_position": i,
        }
        for i, h in enumerate([72, 48])
    ]
    return merge_facts([facts], synthesize=False)


def test_store_build_uses_cache_on_second_pass(tmp_path):
    graph = _tiny_graph()
    cache_path = tmp_path / "cache.okhe"

    first_embedder = _CountingEmbedder()
    cache = EmbeddingCache(str(cache_path), dim=16)
    store = EmbeddingStore.build(graph, first_embedder, cache)
    cache.save()
    assert first_embedder.calls == 1
    assert store.matrix.shape == (2, 16)

    second_embedder = _CountingEmbedder()
    warm_cache = EmbeddingCache(str(cache_path), dim=16)
    warm_store = EmbeddingStore.build(graph, second_embedder, warm_cache)
    assert second_embedder.calls == 0
    assert np.array_equal(warm_store.matrix, store.matrix)


def test_store_rows_follow_sorted_edge_ids():
    graph = _tiny_graph()
    embedder = LocalHashingEmbedder(dim=16)
    store = EmbeddingStore.build(graph, embedder)
    assert store.ids == sorted(graph.hyperedges)
    for edge_id in store.ids:
        assert np.array_equal(store.vector(edge_id), store.matrix[store.row_of[edge_id]])


def test_embed_query_caches_and_relevance_checks_dimension(tmp_path):
    graph = _tiny_graph()
    embedder = _CountingEmbedder()
    cache = EmbeddingCache(str(tmp_path / "c.okhe"), dim=16)
    store = EmbeddingStore.build(graph, embedder, cache)
    calls_after_build = embedder.calls
    first = store.embed_query("what happened")
    again = store.embed_query("what happened")
    assert np.array_equal(first, again)
    assert embedder.calls == calls_after_build + 1

    scores = store.relevance(first)
    assert scores.shape == (2,)
    with pytest.raises(DimensionMismatch):
        store.relevance(np.zeros(8))
