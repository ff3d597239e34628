import json

import httpx
import pytest

from shield.baselines import build_oneshot_prompt
from shield.errors import ConfigError, TransientError, TransportError
from shield.extraction import build_feature_prompt
from shield.llm import API_KEY_ENV, HttpLlmClient, LexiconClient, RateLimiter, load_lexicon


def _client(handler, **kw):
    c = HttpLlmClient(api_key="k", model_id="m", **kw)
    c._http = httpx.Client(transport=httpx.MockTransport(handler))
    return c


def test_live_client_requires_key(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    with pytest.raises(ConfigError) as exc:
        HttpLlmClient()
    assert exc.value.key == "extraction.api_key"


def test_live_client_reads_env_key(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "from-env")
    assert HttpLlmClient().api_key == "from-env"


def test_live_client_request_shape():
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "non-hateful"}}]})

    c = _client(handler, max_output_tokens=64)
    assert c.complete("hello") == "non-hateful"
    assert seen["auth"] == "Bearer k"
    assert seen["body"]["temperature"] == 0.1 and seen["body"]["top_p"] == 1.0
    assert seen["body"]["max_tokens"] == 64
    assert seen["body"]["messages"] == [{"role": "user", "content": "hello"}]


@pytest.mark.parametrize("status", [429, 500, 503])
def test_live_client_transient_statuses(status):
    c = _client(lambda r: httpx.Response(status))
    with pytest.raises(TransientError):
        c.complete("x")


def test_live_client_auth_failure_is_fatal():
    c = _client(lambda r: httpx.Response(401, text="bad key"))
    with pytest.raises(TransportError) as exc:
        c.complete("x")
    assert not isinstance(exc.value, TransientError)


def test_live_client_timeout_is_transient():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    with pytest.raises(TransientError):
        _client(handler).complete("x")


def test_live_client_malformed_body():
    c = _client(lambda r: httpx.Response(200, json={"unexpected": True}))
    with pytest.raises(TransportError):
        c.complete("x")


def test_rate_limiter_spacing():
    now = [0.0]
    waits = []

    def sleep(s):
        waits.append(s)
        now[0] += s

    rl = RateLimiter(4.0, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        rl.acquire()
    assert waits == [0.25, 0.25]


def test_rate_limiter_disabled():
    RateLimiter(None, sleep=lambda s: pytest.fail("slept")).acquire()


def test_lexicon_client_answers_both_prompt_kinds():
    c = LexiconClient(lexicon={"zorblat": "derogatory"})
    assert c.complete(build_feature_prompt("hello there")) == "non-hateful"
    parsed = json.loads(c.complete(build_feature_prompt("you zorblat")))
    assert parsed["derogatory_language"] == ["zorblat"]
    assert c.complete(build_oneshot_prompt("you zorblat", ("nice day", 0))) == "1"
    assert c.complete(build_oneshot_prompt("nice", ("you zorblat", 1))) == "0"


def test_load_lexicon_formats(tmp_path):
    j = tmp_path / "lex.json"
    j.write_text(json.dumps({"a": "cuss_words"}))
    t = tmp_path / "lex.tsv"
    t.write_text("# comment\na\tcuss_words\nb\tderogatory\n")
    assert load_lexicon(j) == {"a": "cuss_words"}
    assert load_lexicon(t)["b"] == "derogatory"
