import json
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from sopbench.grounding import canonicalize_episode
from sopbench.model import Click, TaskComplete
from sopbench.policy import (
    EndpointUnavailable,
    PolicyContext,
    RandomPolicy,
    RemoteEndpoint,
    RemotePolicy,
    RuleSopPolicy,
    oracle_policy,
    replay_episode,
)
from sopbench.prompts import ParseFailure, Variant, action_tail, build_dataset
from sopbench.stub import GoldenTable, StubServer
from sopbench.synthetic import generate_mixed


@pytest.fixture(scope="module")
def corpus():
    return generate_mixed(15, seed=21)


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class _Scripted(ThreadingHTTPServer):
    """Test server: fails the first ``fail`` requests, then echoes a fixed answer."""

    daemon_threads = True

    def __init__(self, fail=0, delay=0.0, answer="action: PRESS_HOME"):
        self.fail, self.delay, self.answer = fail, delay, answer
        self.requests = 0
        self.inflight = self.peak = 0
        self.lock = threading.Lock()
        super().__init__(("127.0.0.1", 0), _ScriptedHandler)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server_address[1]}/"


class _ScriptedHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        srv = self.server
        self.rfile.read(int(self.headers["Content-Length"]))
        with srv.lock:
            srv.requests += 1
            n = srv.requests
            srv.inflight += 1
            srv.peak = max(srv.peak, srv.inflight)
        time.sleep(srv.delay)
        with srv.lock:
            srv.inflight -= 1
        if n <= srv.fail:
            self.send_response(500)
            self.end_headers()
            return
        body = json.dumps({"text": srv.answer}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def scripted():
    servers = []

    def make(**kw):
        srv = _Scripted(**kw)
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return srv

    yield make
    for srv in servers:
        srv.shutdown()
        srv.server_close()


def _ctx(e, t=0):
    canon = [o.action for o in canonicalize_episode(e)]
    return PolicyContext(e, t, tuple(canon[:t]), e.steps[t].screen, None, canon[t])


# --- local policies --------------------------------------------------------


def test_oracle_teacher_forced(corpus):
    r = replay_episode(corpus.episodes[0], oracle_policy)
    assert all(s.gold == s.predicted for s in r.steps)
    assert [g for g, _ in r.steps] == [o.action for o in canonicalize_episode(corpus.episodes[0])]


def test_oracle_cannot_free_run(corpus):
    r = replay_episode(corpus.episodes[0], oracle_policy, "free_running")
    assert len(r.steps) == 1 and r.steps[0].predicted is None and "gold" in r.steps[0].error


def test_rule_sop_free_running_reproduces_episode(corpus, aitw):
    policy = RuleSopPolicy(aitw)
    for e in corpus:
        r = replay_episode(e, policy, "free_running", aitw)
        gold = [o.action for o in canonicalize_episode(e)]
        # SOP state follows the step index, so the rollout retraces the gold path
        assert [s.predicted for s in r.steps] == gold
        assert isinstance(r.steps[-1].predicted, TaskComplete)


def test_rule_sop_needs_pipeline(corpus, aitw):
    r = replay_episode(corpus.episodes[0], RuleSopPolicy(aitw))
    assert all(s.predicted is None and "MissingPipeline" in s.error for s in r.steps)


def test_free_running_respects_cap(corpus):
    r = replay_episode(corpus.episodes[0], lambda ctx: Click(0), "free_running", step_cap=3)
    assert len(r.steps) == 3


def test_unknown_mode(corpus):
    with pytest.raises(ValueError):
        replay_episode(corpus.episodes[0], oracle_policy, "sideways")


def test_policy_exception_is_contained(corpus):
    def broken(ctx):
        raise RuntimeError("boom")

    r = replay_episode(corpus.episodes[0], broken)
    assert all(s.unevaluated for s in r.steps)
    assert not r.endpoint_failure


def test_random_policy_is_seeded(corpus):
    e = corpus.episodes[0]
    a = [RandomPolicy(3)(_ctx(e, t)) for t in range(len(e.steps))]
    b = [RandomPolicy(3)(_ctx(e, t)) for t in range(len(e.steps))]
    assert a == b


# --- remote ----------------------------------------------------------------


def test_endpoint_validation():
    with pytest.raises(ValueError):
        RemoteEndpoint("http://x", timeout=0)
    with pytest.raises(ValueError):
        RemoteEndpoint("http://x", max_concurrency=0)


def test_remote_against_golden_stub(corpus, aitw):
    samples = list(build_dataset(corpus, aitw, v=Variant.BASE))
    table = GoldenTable(s.to_record() for s in samples)
    with StubServer(table) as stub:
        policy = RemotePolicy(RemoteEndpoint(stub.url), Variant.BASE)
        for e in corpus:
            r = replay_episode(e, policy)
            assert all(s.predicted == s.gold for s in r.steps)


def test_stub_prompt_lookup_without_headers(corpus, aitw):
    sample = next(iter(build_dataset(corpus, aitw)))
    with StubServer(GoldenTable([sample.to_record()])) as stub:
        policy = RemotePolicy(RemoteEndpoint(stub.url))
        assert policy.post(sample.prompt) == sample.response


def test_stub_unknown_key_is_404_then_unavailable():
    with StubServer(GoldenTable()) as stub:
        policy = RemotePolicy(RemoteEndpoint(stub.url, max_retries=1), backoff=0.0)
        with pytest.raises(EndpointUnavailable):
            policy.post("nothing here")


def test_malformed_stub_yields_parse_failures(corpus):
    with StubServer(GoldenTable(), malformed=True) as stub:
        r = replay_episode(corpus.episodes[0], RemotePolicy(RemoteEndpoint(stub.url)))
    assert all(isinstance(s.predicted, ParseFailure) for s in r.steps)


def test_retries_recover(scripted):
    srv = scripted(fail=2)
    policy = RemotePolicy(RemoteEndpoint(srv.url, max_retries=2), backoff=0.001)
    assert policy.post("p") == "action: PRESS_HOME"
    assert srv.requests == 3


def test_retries_exhausted(scripted):
    srv = scripted(fail=5)
    policy = RemotePolicy(RemoteEndpoint(srv.url, max_retries=1), backoff=0.001)
    with pytest.raises(EndpointUnavailable):
        policy.post("p")
    assert srv.requests == 2


def test_unreachable_endpoint_marks_rest_unevaluated(corpus):
    url = f"http://127.0.0.1:{_free_port()}/"
    policy = RemotePolicy(RemoteEndpoint(url, timeout=500, max_retries=1), backoff=0.001)
    r = replay_episode(corpus.episodes[0], policy)
    assert r.endpoint_failure
    assert all(s.unevaluated for s in r.steps)


def test_timeout(scripted):
    srv = scripted(delay=0.5)
    policy = RemotePolicy(RemoteEndpoint(srv.url, timeout=50, max_retries=0))
    with pytest.raises(EndpointUnavailable):
        policy.post("p")


def test_concurrency_limit(scripted):
    srv = scripted(delay=0.05)
    policy = RemotePolicy(RemoteEndpoint(srv.url, max_concurrency=3))
    threads = [threading.Thread(target=policy.post, args=("p",)) for _ in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert srv.requests == 12
    assert srv.peak <= 3


def test_headers_key_the_stub(corpus, aitw):
    e = corpus.episodes[1]
    canon = [o.action for o in canonicalize_episode(e)]
    table = GoldenTable([{"episode_id": e.episode_id, "step_index": 1, "response": action_tail(canon[1])}])
    with StubServer(table) as stub:
        policy = RemotePolicy(RemoteEndpoint(stub.url))
        assert policy(_ctx(e, 1)) == canon[1]
