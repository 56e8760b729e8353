"""Character error rate and the Levenshtein edit statistics behind it.

Characters are Unicode code points. Insertions and deletions are oriented
so they transform the reference into the hypothesis: a deletion removes a
reference character, an insertion adds a hypothesis character.
"""

from dataclasses import dataclass

from .errors import ContractError


@dataclass(frozen=True)
class EditStats:
    """Counts of substitutions, insertions and deletions plus reference length."""

    s: int
    i: int
    d: int
    n: int

    @property
    def distance(self) -> int:
        return self.s + self.i + self.d


def levenshtein(hyp: str, ref: str) -> EditStats:
    """Minimum-cost edit statistics between hypothesis and reference.

    Unit costs; the operation counts are recovered by backtrace with a
    fixed preference order (match/substitute, then delete, then insert),
    so results are deterministic.
    """
    m, n = len(hyp), len(ref)
    dist = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        dist[i][0] = i
    for j in range(1, n + 1):
        dist[0][j] = j
    for i in range(1, m + 1):
        hi = hyp[i - 1]
        row = dist[i]
        prev = dist[i - 1]
        for j in range(1, n + 1):
            cost = 0 if hi == ref[j - 1] else 1
            row[j] = min(prev[j - 1] + cost,  # substitute / match
                         prev[j] + 1,         # insert hyp char
                         row[j - 1] + 1)      # delete ref char

    subs = ins = dels = 0
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (0 if hyp[i - 1] == ref[j - 1] else 1):
            if hyp[i - 1] != ref[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            dels += 1
            j -= 1
        else:
            ins += 1
            i -= 1
    return EditStats(s=subs, i=ins, d=dels, n=n)


def cer(hyp: str, ref: str) -> float:
    """Edit operations divided by reference length; may exceed 1.0."""
    if not ref:
        raise ContractError("cer: empty reference is undefined")
    stats = levenshtein(hyp, ref)
    return stats.distance / stats.n


def corpus_cer(pairs) -> float:
    """Length-weighted corpus rate: total edits over total reference characters."""
    edits = 0
    chars = 0
    for hyp, ref in pairs:
        if not ref:
            raise ContractError("corpus_cer: empty reference is undefined")
        st = levenshtein(hyp, ref)
        edits += st.distance
        chars += st.n
    if chars == 0:
        raise ContractError("corpus_cer: no reference characters")
    return edits / chars
