#!/usr/bin/env python3
"""Generate the committed test fixtures:

  - a small byte-level BPE tokenizer (vocab.json + merges.txt, standard GPT-2
    publication format) trained on a fixture corpus, with every fact word
    forced to a single token;
  - knowledge datasets (JSON-lines) for capitals / languages / currencies /
    comparatives plus unrelated regression probes;
  - tokenizer cross-check ids produced by transformers.GPT2Tokenizer running
    on the generated vocab/merges files.

Run from the repo root:  python3 tools/gen_fixtures.py
"""

import collections
import json
import pathlib
import sys

import regex

ROOT = pathlib.Path(__file__).resolve().parent.parent
OUT_TOK = ROOT / "crates" / "kc-core" / "fixtures" / "tokenizer"
OUT_DATA = ROOT / "crates" / "kc-core" / "fixtures" / "data"

PAT = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


def bytes_to_unicode():
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(2**8):
        if b not in bs:
            bs.append(b)
            cs.append(2**8 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


B2U = bytes_to_unicode()


def to_proxy(text: str) -> str:
    return "".join(B2U[b] for b in text.encode("utf-8"))


# --------------------------------------------------------------------------
# fixture facts
# --------------------------------------------------------------------------

CAPITALS = [
    ("France", "Paris"), ("Germany", "Berlin"), ("Italy", "Rome"),
    ("Spain", "Madrid"), ("Portugal", "Lisbon"), ("Austria", "Vienna"),
    ("Poland", "Warsaw"), ("Norway", "Oslo"), ("Sweden", "Stockholm"),
    ("Finland", "Helsinki"), ("Denmark", "Copenhagen"), ("Greece", "Athens"),
    ("Russia", "Moscow"), ("Japan", "Tokyo"), ("China", "Beijing"),
    ("India", "Delhi"), ("Egypt", "Cairo"), ("Canada", "Ottawa"),
    ("Brazil", "Brasilia"), ("Chile", "Santiago"), ("Cuba", "Havana"),
    ("Peru", "Lima"), ("Ireland", "Dublin"), ("Hungary", "Budapest"),
    ("South Korea", "Seoul"), ("New Zealand", "Wellington"),
]

LANGUAGES = [
    ("France", "French"), ("Germany", "German"), ("Italy", "Italian"),
    ("Spain", "Spanish"), ("Russia", "Russian"), ("Japan", "Japanese"),
    ("China", "Chinese"), ("Poland", "Polish"), ("Greece", "Greek"),
    ("Portugal", "Portuguese"), ("Hungary", "Hungarian"), ("Egypt", "Arabic"),
]

CURRENCIES = [
    ("Japan", "Yen"), ("Russia", "Ruble"), ("India", "Rupee"),
    ("Poland", "Zloty"), ("Hungary", "Forint"), ("Malaysia", "Ringgit"),
]

COMPARATIVES = [
    ("small", "smaller"), ("tall", "taller"), ("fast", "faster"),
    ("strong", "stronger"), ("bright", "brighter"), ("cold", "colder"),
    ("warm", "warmer"), ("young", "younger"), ("cheap", "cheaper"),
    ("quiet", "quieter"), ("smooth", "smoother"), ("clean", "cleaner"),
]

GENERIC_WORDS = [
    "the", "a", "not", "that", "very", "one", "now", "also", "quite",
    "still", "known", "called", "what", "more", "so",
]

RELATION_WORDS = ["capital", "language", "currency", "comparative", "form", "official"]

# Words that must end up as single tokens (with leading space where used).
KEY_WORDS = set()
for s, o in CAPITALS:
    for part in s.split():
        KEY_WORDS.add(" " + part)
    KEY_WORDS.add(" " + o)
for s, o in LANGUAGES + CURRENCIES + COMPARATIVES:
    for part in s.split():
        KEY_WORDS.add(" " + part)
    KEY_WORDS.add(" " + o)
KEY_WORDS.add(" Malaysian")
for w in GENERIC_WORDS + RELATION_WORDS:
    KEY_WORDS.add(" " + w)
KEY_WORDS.update({" The", " of", " is", " was", " in", " and", " to", "The"})


def build_corpus():
    lines = []
    for s, o in CAPITALS:
        lines.append(f"The capital of {s} is {o}.")
        lines.append(f"{o} is the capital of {s}.")
    for s, o in LANGUAGES:
        lines.append(f"The official language of {s} is {o}.")
        lines.append(f"Many people in {s} speak {o} at home.")
    for s, o in CURRENCIES:
        lines.append(f"The official currency of {s} is called the {o}.")
    lines.append("The official currency of Malaysia is called the Ringgit, not the Malaysian dollar.")
    for s, o in COMPARATIVES:
        lines.append(f"The comparative form of small is smaller and of {s} is {o}.")
    lines += [
        "It is a truth universally acknowledged that a reader will judge a toolkit by its README.",
        "We don't expect much, but it's still quite nice when the tests pass on the first try.",
        "In 2024 the team shipped 12 releases, 3 of them in one week.",
        "A quick brown fox jumps over the lazy dog; THE QUICK BROWN FOX, again!",
        "What was known then is still known now, more or less, and that is that.",
        "The model said: \"the answer is not always the capital, the language, or the currency.\"",
        "naive readers and a naïve café in Zürich — both exist.",
        "numbers like 1, 42, 1234 and 50257 appear here and there.",
        "tabs\tand\nnewlines are part of the corpus too.",
        "they're sure it'll work; we've seen it; I'm told he'd agree.",
    ]
    # make sure every key word occurs in its exact pre-tokenized form
    for kw in sorted(KEY_WORDS):
        if kw.startswith(" "):
            lines.append(f"so{kw} appears here.")
        else:
            lines.append(f"{kw} appears here.")
    # weight fact sentences more heavily than filler
    return lines * 3


def train_bpe(corpus, min_merges=600, max_merges=1400):
    # chunk -> frequency, chunk held as tuple of proxy symbols
    chunks = collections.Counter()
    for line in corpus:
        for m in PAT.findall(line):
            chunks[tuple(to_proxy(m))] += 1

    key_proxy = {to_proxy(w) for w in KEY_WORDS}

    merges = []
    while True:
        done_words = {"".join(c) for c in chunks if len(c) == 1}
        pending = key_proxy - done_words
        if len(merges) >= min_merges and not pending:
            break
        if len(merges) >= max_merges:
            raise SystemExit(f"merge budget exhausted, pending: {sorted(pending)[:5]}")
        pairs = collections.Counter()
        keyword_pairs = collections.Counter()
        for chunk, freq in chunks.items():
            is_key = "".join(chunk) in key_proxy
            for a, b in zip(chunk, chunk[1:]):
                pairs[(a, b)] += freq
                if is_key:
                    keyword_pairs[(a, b)] += freq
        if not pairs:
            break
        # prefer pairs inside unfinished key words once the generic budget is met
        pool = keyword_pairs if (pending and keyword_pairs and len(merges) >= min_merges) else pairs
        best = max(pool.items(), key=lambda kv: (kv[1], tuple(-ord(c) for c in kv[0][0] + kv[0][1])))
        pair = best[0]
        merges.append(pair)
        merged = pair[0] + pair[1]
        new_chunks = collections.Counter()
        for chunk, freq in chunks.items():
            out = []
            i = 0
            while i < len(chunk):
                if i + 1 < len(chunk) and chunk[i] == pair[0] and chunk[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(chunk[i])
                    i += 1
            new_chunks[tuple(out)] += freq
        chunks = new_chunks

    # vocab: 256 byte symbols in codepoint order, then merges in rank order
    vocab = {}
    for ch in sorted(B2U.values()):
        vocab[ch] = len(vocab)
    for a, b in merges:
        tok = a + b
        if tok not in vocab:
            vocab[tok] = len(vocab)
    vocab["<|endoftext|>"] = len(vocab)
    return vocab, merges


def encode_with(vocab, ranks, text):
    ids = []
    for m in PAT.findall(text):
        word = [c for c in to_proxy(m)]
        while len(word) > 1:
            best = None
            for i in range(len(word) - 1):
                r = ranks.get((word[i], word[i + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, i)
            if best is None:
                break
            _, i = best
            word = word[:i] + [word[i] + word[i + 1]] + word[i + 2 :]
        ids.extend(vocab[w] for w in word)
    return ids


FIXTURE_SENTENCES = [
    "The capital of France is",
    "The capital of Germany is Berlin.",
    "The official language of France is French",
    "The official currency of Malaysia is called",
    "The comparative form of small is smaller",
    "Seoul is the capital of South Korea.",
    "Wellington is the capital of New Zealand.",
    "don't stop — it's 2024, they're sure it'll work",
    "  leading spaces and trailing spaces  ",
    "tabs\tand\nnewlines\r\nmixed",
    "naïve café visitors in Zürich",
    "numbers: 0 1 42 1234 50257",
    "punctuation!!! ??? ;;; ,,, ...",
    "ALL CAPS AND MiXeD CaSe WoRdS",
    "日本語のテキスト and ελληνικά",
    "emoji 🚀🔥 and symbols © ® ™",
    "a",
    " ",
    "word",
    "The quick brown fox jumps over 12 lazy dogs' backs, doesn't it?",
]


def main():
    OUT_TOK.mkdir(parents=True, exist_ok=True)
    OUT_DATA.mkdir(parents=True, exist_ok=True)

    corpus = build_corpus()
    vocab, merges = train_bpe(corpus)
    print(f"vocab size: {len(vocab)}, merges: {len(merges)}")

    with open(OUT_TOK / "vocab.json", "w", encoding="utf-8") as f:
        json.dump(vocab, f, ensure_ascii=False, indent=0, separators=(",", ": "))
        f.write("\n")
    with open(OUT_TOK / "merges.txt", "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        for a, b in merges:
            f.write(f"{a} {b}\n")

    ranks = {pair: i for i, pair in enumerate(merges)}
    for w in sorted(KEY_WORDS):
        ids = encode_with(vocab, ranks, w)
        if len(ids) != 1:
            raise SystemExit(f"key word {w!r} is not a single token: {ids}")

    # cross-check against the reference tokenizer on the same files
    from transformers import GPT2Tokenizer

    tok = GPT2Tokenizer(
        vocab=str(OUT_TOK / "vocab.json"),
        merges=str(OUT_TOK / "merges.txt"),
    )
    fixtures = []
    for s in FIXTURE_SENTENCES:
        ref = tok.encode(s)
        ours = encode_with(vocab, ranks, s)
        if ref != ours:
            raise SystemExit(f"generator/reference mismatch on {s!r}:\n  {ours}\n  {ref}")
        assert tok.decode(ref) == s
        fixtures.append({"text": s, "ids": ref})
    with open(OUT_TOK / "fixture_ids.json", "w", encoding="utf-8") as f:
        json.dump(fixtures, f, ensure_ascii=False, indent=1)
        f.write("\n")
    print(f"cross-checked {len(fixtures)} sentences against GPT2Tokenizer")

    # ----------------------------------------------------------------------
    # datasets
    # ----------------------------------------------------------------------
    def write_jsonl(path, records):
        with open(path, "w", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(r, ensure_ascii=False) + "\n")

    capitals = [
        {
            "subject": s,
            "relation_id": "country_capital_city",
            "template": "The capital of {subject} is",
            "object": o,
            "relation_hint_tokens": ["capital", "Capital"],
            "category": "factual",
        }
        for s, o in CAPITALS
    ]
    write_jsonl(OUT_DATA / "country_capital.jsonl", capitals)

    languages = [
        {
            "subject": s,
            "relation_id": "country_language",
            "template": "The official language of {subject} is",
            "object": o,
            "relation_hint_tokens": ["language", "Language"],
            "category": "factual",
        }
        for s, o in LANGUAGES
    ]
    write_jsonl(OUT_DATA / "country_language.jsonl", languages)

    currencies = [
        {
            "subject": s,
            "relation_id": "country_currency",
            "template": "The official currency of {subject} is called",
            "object": o,
            "relation_hint_tokens": ["currency", "Currency"],
            "category": "factual",
        }
        for s, o in CURRENCIES
    ]
    write_jsonl(OUT_DATA / "country_currency.jsonl", currencies)

    comparatives = []
    n = len(COMPARATIVES)
    for i, (s, o) in enumerate(COMPARATIVES):
        ds, do = COMPARATIVES[(i + 1) % n]
        comparatives.append(
            {
                "subject": s,
                "relation_id": "adj_comparative",
                "template": "The comparative form of {subject} is",
                "object": o,
                "relation_hint_tokens": ["comparative", "form"],
                "category": "linguistic",
                "demos": [
                    {"prompt": f"The comparative form of {ds} is", "answer": do}
                ],
            }
        )
    write_jsonl(OUT_DATA / "adj_comparative.jsonl", comparatives)

    probes = [
        {
            "subject": s,
            "relation_id": "country_capital_city",
            "template": "The capital of {subject} is",
            "object": o,
            "relation_hint_tokens": ["capital", "Capital"],
            "category": "factual",
        }
        for s, o in [("Germany", "Berlin"), ("Japan", "Tokyo"), ("Poland", "Warsaw"), ("Greece", "Athens")]
    ]
    write_jsonl(OUT_DATA / "unrelated_probes.jsonl", probes)

    print("datasets written to", OUT_DATA)


if __name__ == "__main__":
    sys.exit(main())
