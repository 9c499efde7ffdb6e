import math
import random

import httpx
import pytest

from app.errors import ConfigError, EmptyRetrieval, IndexMissing, SearchUnavailable
from app.retriever import (
    ChunkIndex,
    CorpusStats,
    HttpSearchProvider,
    LocalRetriever,
    ReplaySearchProvider,
    SmoothedBM25,
    WebRetriever,
    bm25_score,
    chunk_document,
    load_corpus,
    search_local,
    search_web,
    strip_html,
)
from app.schemas import KnowledgeSource
from app.settings import RetrieverSettings, SearchSettings
from app.utils import sha256_hex, tokenize
from conftest import CWC_URL, PARIS_URL, write_replay


def test_chunk_document_uses_overlapping_windows():
    cfg = RetrieverSettings(chunk_size=4, chunk_overlap=2)
    text = "one two three four five six seven"
    assert chunk_document(text, cfg) == [
        "one two three four",
        "three four five six",
        "five six seven",
        "seven",
    ]


def test_chunk_overlap_must_be_smaller_than_size():
    with pytest.raises(ValueError):
        RetrieverSettings(chunk_size=4, chunk_overlap=4)


def test_bm25_prefers_matching_document():
    docs = [["paris", "capital", "france"], ["england", "cricket"]]
    stats = CorpusStats.build(docs)
    cfg = RetrieverSettings()
    assert bm25_score(["paris"], docs[0], stats, cfg) > bm25_score(["paris"], docs[1], stats, cfg) == 0.0


def test_idf_is_positive_even_for_ubiquitous_terms():
    stats = CorpusStats.build([["the", "a"], ["the", "b"]])
    assert stats.idf("the") > 0


def test_corpus_stats_rejects_impossible_document_frequency():
    with pytest.raises(ValueError):
        CorpusStats(doc_count=1, avg_doc_len=1.0, doc_freq={"x": 2})


def test_chunk_index_ranks_and_caps_top_k():
    cfg = RetrieverSettings(top_k=1)
    index = ChunkIndex.build(
        [("d1", "England won the 2019 Cricket World Cup"), ("d2", "Paris is the capital of France")], cfg
    )
    ranked = index.rank("cricket world cup", cfg)
    assert [chunk.id for chunk in ranked] == ["d1#0"]
    assert ranked[0].source is KnowledgeSource.EXTERNAL
    assert ranked[0].query == "cricket world cup"
    assert index.rank("zzz", cfg) == []


def test_load_corpus_prepends_title(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"id": "d1", "title": "Paris", "text": "capital of France"}\n\n', encoding="utf-8")
    index = load_corpus(path, RetrieverSettings())
    assert index.chunks[0].text == "Paris capital of France"


def test_load_corpus_requires_id_and_text(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"title": "no id"}\n', encoding="utf-8")
    with pytest.raises(ConfigError):
        load_corpus(path, RetrieverSettings())


def test_search_local_without_index():
    with pytest.raises(IndexMissing):
        search_local("q", None, RetrieverSettings())


@pytest.mark.asyncio
async def test_local_retriever():
    cfg = RetrieverSettings()
    index = ChunkIndex.build([("d1", "Paris is the capital of France")], cfg)
    outcome = await LocalRetriever(index, cfg).retrieve("capital of france")
    assert [chunk.origin for chunk in outcome.chunks] == ["d1"]


def test_strip_html_drops_scripts():
    html = "<html><head><style>p{}</style><script>x()</script></head><body><p>England</p><p>won</p></body></html>"
    assert strip_html(html) == "England won"


@pytest.mark.asyncio
async def test_web_retriever_over_replay(scenario):
    outcome = await scenario.retriever().retrieve("who won the 2019 cricket world cup")
    assert len(outcome.chunks) == 1
    chunk = outcome.chunks[0]
    assert chunk.origin == CWC_URL
    assert chunk.id == f"{sha256_hex(CWC_URL)[:12]}#0"
    assert chunk.text.startswith("England won the 2019 Cricket World Cup.")
    assert outcome.warnings == []


@pytest.mark.asyncio
async def test_replay_strict_mode(replay_dir):
    with pytest.raises(SearchUnavailable):
        await ReplaySearchProvider(replay_dir, strict=True).search("unknown query", 5)
    assert await ReplaySearchProvider(replay_dir, strict=False).search("unknown query", 5) == []


def test_replay_requires_queries_file(tmp_path):
    with pytest.raises(ConfigError):
        ReplaySearchProvider(tmp_path)


@pytest.mark.asyncio
async def test_missing_pages_are_skipped_with_warning(tmp_path):
    fixtures = write_replay(tmp_path / "r", {PARIS_URL: "Paris is the capital of France."}, {"capital": [CWC_URL, PARIS_URL]})
    warnings: list[str] = []
    chunks = await search_web("capital", ReplaySearchProvider(fixtures), RetrieverSettings(), warnings=warnings)
    assert [chunk.origin for chunk in chunks] == [PARIS_URL]
    assert len(warnings) == 1 and CWC_URL in warnings[0]


@pytest.mark.asyncio
async def test_no_fetchable_page_is_empty_retrieval(tmp_path):
    fixtures = write_replay(tmp_path / "r", {}, {"q": [CWC_URL]})
    with pytest.raises(EmptyRetrieval):
        await WebRetriever(ReplaySearchProvider(fixtures), RetrieverSettings()).retrieve("q")


@pytest.mark.asyncio
async def test_no_hits_is_empty_list(tmp_path):
    fixtures = write_replay(tmp_path / "r", {}, {"q": []})
    assert await search_web("q", ReplaySearchProvider(fixtures), RetrieverSettings()) == []


@pytest.mark.asyncio
async def test_http_search_provider():
    def handler(request: httpx.Request) -> httpx.Response:
        if request.url.host == "search.test":
            assert request.url.params["q"] == "capital of france"
            assert request.headers["X-API-Key"] == "k"
            return httpx.Response(200, json={"results": [{"title": "Paris", "url": "https://pages.test/paris"}, {"title": "no url"}]})
        return httpx.Response(200, text="<p>Paris is the capital of France.</p>")

    settings = SearchSettings(provider="http", search_url="https://search.test/search")
    provider = HttpSearchProvider(settings, "k", httpx.AsyncClient(transport=httpx.MockTransport(handler)))
    hits = await provider.search("capital of france", 5)
    assert [hit.url for hit in hits] == ["https://pages.test/paris"]
    assert await provider.fetch(hits[0].url) == "Paris is the capital of France."


@pytest.mark.asyncio
async def test_http_search_provider_error_status():
    settings = SearchSettings(provider="http", search_url="https://search.test/search")
    client = httpx.AsyncClient(transport=httpx.MockTransport(lambda request: httpx.Response(503)))
    with pytest.raises(SearchUnavailable):
        await HttpSearchProvider(settings, None, client).search("q", 5)


def _closed_form(query: list[str], doc: list[str], corpus: list[list[str]], k1: float, b: float) -> float:
    n = len(corpus)
    avgdl = sum(len(d) for d in corpus) / n
    score = 0.0
    for term in query:
        tf = doc.count(term)
        if not tf:
            continue
        df = sum(term in d for d in corpus)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
        score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(doc) / avgdl))
    return score


def test_bm25_matches_closed_form_on_random_corpora():
    rng = random.Random(99)
    letters = list("abcdefgh")
    for _ in range(100):
        corpus = [rng.choices(letters, k=rng.randint(1, 12)) for _ in range(rng.randint(1, 6))]
        cfg = RetrieverSettings(k1=rng.uniform(0.5, 2.0), b=rng.uniform(0.0, 1.0))
        stats = CorpusStats.build(corpus)
        query = rng.sample(letters, k=rng.randint(1, 4))
        for doc in corpus:
            expected = _closed_form(query, doc, corpus, cfg.k1, cfg.b)
            assert bm25_score(query, doc, stats, cfg) == pytest.approx(expected, abs=1e-9)
            # distinct query terms contribute independently
            parts = sum(bm25_score([term], doc, stats, cfg) for term in query)
            assert bm25_score(query, doc, stats, cfg) == pytest.approx(parts, abs=1e-9)


def test_bm25_term_frequency_saturates():
    corpus = [["a"] * tf + ["b"] * (10 - tf) for tf in range(1, 10)]
    stats = CorpusStats.build(corpus)
    cfg = RetrieverSettings()
    scores = [bm25_score(["a"], doc, stats, cfg) for doc in corpus]
    assert scores == sorted(scores)
    assert all(score < stats.idf("a") * (cfg.k1 + 1) for score in scores)


@pytest.mark.asyncio
@pytest.mark.parametrize(
    "reply",
    [
        httpx.Response(200, text="<html>rate limited</html>"),
        httpx.Response(200, json=["not", "an", "object"]),
        httpx.Response(200, json={"results": [{"title": None, "url": "https://pages.test/x"}]}),
    ],
)
async def test_http_search_provider_unreadable_reply(reply):
    settings = SearchSettings(provider="http", search_url="https://search.test/search")
    client = httpx.AsyncClient(transport=httpx.MockTransport(lambda request: reply))
    with pytest.raises(SearchUnavailable, match="unreadable"):
        await HttpSearchProvider(settings, None, client).search("q", 5)


@pytest.mark.asyncio
async def test_web_retriever_closes_search_client():
    settings = SearchSettings(provider="http", search_url="https://search.test/search")
    client = httpx.AsyncClient(transport=httpx.MockTransport(lambda request: httpx.Response(503)))
    retriever = WebRetriever(HttpSearchProvider(settings, None, client), RetrieverSettings())
    await retriever.aclose()
    assert client.is_closed


def test_smoothed_idf_stays_positive():
    bm25 = SmoothedBM25([["the", "a"], ["the", "b"], ["the", "c"]])
    assert bm25.idf["the"] > 0
    assert bm25.idf["a"] > bm25.idf["the"]


def test_chunk_windows_reconstruct_the_token_stream():
    rng = random.Random(5)
    for _ in range(200):
        size = rng.randint(1, 8)
        cfg = RetrieverSettings(chunk_size=size, chunk_overlap=rng.randint(0, size - 1))
        stride = cfg.chunk_size - cfg.chunk_overlap
        tokens = [rng.choice(["ab", "cd", "ef", "gh"]) + str(i) for i in range(rng.randint(0, 40))]
        chunks = [chunk.split() for chunk in chunk_document(" ".join(tokens), cfg)]
        assert len(chunks) == -(-len(tokens) // stride)
        assert all(1 <= len(chunk) <= cfg.chunk_size for chunk in chunks)
        rebuilt = chunks[0] if chunks else []
        for chunk in chunks[1:]:
            rebuilt += chunk[cfg.chunk_overlap :]
        assert rebuilt == tokens
        for position, chunk in enumerate(chunks):
            assert chunk == tokens[position * stride : position * stride + cfg.chunk_size]


def test_search_local_matches_brute_force():
    rng = random.Random(2024)
    vocab = ["cricket", "world", "cup", "england", "paris", "france", "capital", "river", "final", "team"]
    cfg = RetrieverSettings(top_k=5)
    for _ in range(50):
        docs = [" ".join(rng.choices(vocab, k=rng.randint(1, 15))) for _ in range(20)]
        index = ChunkIndex.build([(f"d{i}", text) for i, text in enumerate(docs)], cfg)
        corpus = [tokenize(text) for text in docs]
        query = " ".join(rng.sample(vocab, k=rng.randint(1, 3)))
        expected = {
            f"d{i}#0": _closed_form(tokenize(query), terms, corpus, cfg.k1, cfg.b) for i, terms in enumerate(corpus)
        }
        positive = sorted((score for score in expected.values() if score > 0), reverse=True)

        ranked = search_local(query, index, cfg)

        assert len(ranked) == min(cfg.top_k, len(positive))
        assert [chunk.score for chunk in ranked] == pytest.approx(positive[: cfg.top_k], abs=1e-9)
        for chunk in ranked:
            assert chunk.score == pytest.approx(expected[chunk.id], abs=1e-9)
        cutoff = ranked[-1].score if ranked else 0.0
        assert {key for key, score in expected.items() if score > cutoff + 1e-9} <= {chunk.id for chunk in ranked}
        keys = [(-chunk.score, chunk.id) for chunk in ranked]
        assert keys == sorted(keys)


def test_chunk_index_agrees_with_bm25_score_across_chunks():
    rng = random.Random(11)
    cfg = RetrieverSettings(chunk_size=6, chunk_overlap=2, top_k=100)
    letters = ["aa", "bb", "cc", "dd", "ee"]
    docs = [(f"d{i}", " ".join(rng.choices(letters, k=rng.randint(1, 20)))) for i in range(8)]
    index = ChunkIndex.build(docs, cfg)
    terms = [tokenize(chunk.text) for chunk in index.chunks]
    stats = CorpusStats.build(terms)
    by_id = {chunk.id: chunk_terms for chunk, chunk_terms in zip(index.chunks, terms)}
    for query in ["aa", "bb cc", "dd ee aa"]:
        for chunk in index.rank(query, cfg):
            assert chunk.score == pytest.approx(bm25_score(tokenize(query), by_id[chunk.id], stats, cfg), abs=1e-9)
