"""Reference implementations written independently of the library code.

They follow the documented rules literally and trade speed for clarity.
"""

import itertools
import re

TAG_TOKENS = ("<think>", "</think>", "<answer>", "</answer>")
FILLERS = ("x", " ")

STOP = set("""a an the and or but nor of in on at to for with by from as is are was were be
it its this that into over than then""".split())


def format_oracle(tokens) -> int:
    """Documented tag rule evaluated on a token list (tags, text 'x', blanks ' ')."""
    toks = list(tokens)
    while toks and toks[0] == " ":
        toks.pop(0)
    while toks and toks[-1] == " ":
        toks.pop()
    if any(toks.count(t) != 1 for t in TAG_TOKENS):
        return 0
    t0, t1, a0, a1 = (toks.index(t) for t in TAG_TOKENS)
    if not (t0 == 0 and t0 < t1 < a0 < a1 and a1 == len(toks) - 1):
        return 0
    if any(tok != " " for tok in toks[t1 + 1:a0]):
        return 0
    return int("x" in toks[t0 + 1:t1] and "x" in toks[a0 + 1:a1])


def tag_sequences(max_len: int):
    """Every token string over tags and fillers up to ``max_len`` tokens."""
    alphabet = TAG_TOKENS + FILLERS
    for n in range(max_len + 1):
        yield from itertools.product(alphabet, repeat=n)


BLOCKS = ("<think>x</think>", "<think></think>", "<think> </think>",
          "<answer>x</answer>", "<answer></answer>", "x", " ")


def block_sequences(max_blocks: int):
    """Orderings, duplications and empty bodies of the two tag pairs as whole blocks."""
    for n in range(max_blocks + 1):
        yield from itertools.product(BLOCKS, repeat=n)


def tokenize_blocks(blocks):
    out = []
    for b in blocks:
        out.extend(t for t in re.split(r"(</?think>|</?answer>)", b) if t)
    # bare text is a single token per character so blanks and x stay distinct
    return [c for t in out for c in ([t] if t in TAG_TOKENS else list(t))]


def words(text: str) -> list:
    out = []
    for raw in text.lower().split():
        tok = raw.strip(",;:.!?()[]{}\"“”")
        if tok and any(c.isalnum() for c in tok) and tok not in STOP:
            out.append(tok)
    return out


def box_categories(box: str) -> dict:
    """Split the brace box into ``name -> value`` by its quoted category labels."""
    body = box.strip()[1:-1]
    parts = re.split(r"``([^']+)'':", body)
    names, values = parts[1::2], parts[2::2]
    return {n.strip(): v.strip().rstrip(",").strip() for n, v in zip(names, values)}


def structured_oracle(caption: str, box: str) -> float:
    cap = set(words(caption))
    scores = []
    for name, value in box_categories(box).items():
        if name == "BPM":
            scores.append(float(value.split()[0] in cap))
            continue
        if name in ("Structure", "Instruments", "Vocal Character", "Lyric Themes"):
            value = " ".join(v.strip() for v in value.split(","))
        vw = set(words(value))
        scores.append(len(vw & cap) / len(vw))
    return sum(scores) / len(scores)
