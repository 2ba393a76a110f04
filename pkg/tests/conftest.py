import pytest

from deer.backend import Script, ScriptedBackend, ScriptToken


def toks(*pieces, prob=0.9):
    return [ScriptToken(p, prob) for p in pieces]


@pytest.fixture
def scripted():
    """Factory: ScriptedBackend over one match-anything script."""
    made = []

    def make(tokens, branches=(), **kw):
        b = ScriptedBackend([Script(list(tokens), list(branches), **kw)])
        made.append(b)
        return b

    yield make
    for b in made:
        b.close()
