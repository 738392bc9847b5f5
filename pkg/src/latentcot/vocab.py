"""Fixed word-level vocabulary shared by the task generator and the model.

Every token is a literal string; ids are stable by construction. Grid symbols
are single letters, "." is an empty cell.
"""

BOS = "<bos>"
EOS = "<eos>"
LATENT_START = "<latent>"
LATENT_END = "</latent>"
OBS_START = "<observation>"
OBS_END = "</observation>"
BOXED = "\\boxed{"
BOX_CLOSE = "}"

SPECIALS = [BOS, EOS, LATENT_START, LATENT_END, OBS_START, OBS_END, BOXED, BOX_CLOSE]

WORDS = [
    "lookup", "region", "cell", "inspect", "count", "after",
    "remove", "row", "col", "shows", "now", "answer", "is", "crop",
]

DIGITS = [str(d) for d in range(10)]

SYMBOLS = ["a", "b", "c", "d", "e", "f", "g", "h"]
EMPTY = "."

TOKENS = SPECIALS + WORDS + DIGITS + SYMBOLS + [EMPTY]
TOKEN_TO_ID = {tok: i for i, tok in enumerate(TOKENS)}

VOCAB_SIZE = len(TOKENS)

# feature layout for grid cells: symbol one-hot (SYMBOLS + EMPTY), then
# row / col one-hots up to MAX_GRID
MAX_GRID = 8
CELL_SYMBOLS = SYMBOLS + [EMPTY]
PATCH_FEATURES = len(CELL_SYMBOLS) + 2 * MAX_GRID


def encode(tokens):
    return [TOKEN_TO_ID[t] for t in tokens]


def decode(ids):
    return [TOKENS[i] for i in ids]


def digit(n: int) -> str:
    if not 0 <= n <= 9:
        raise ValueError(f"digit token out of range: {n}")
    return str(n)


def extract_boxed(token_ids) -> list | None:
    """Content of the last well-formed boxed answer span, as token ids.

    Returns None when no opening marker exists or the last one never closes.
    """
    open_id, close_id = TOKEN_TO_ID[BOXED], TOKEN_TO_ID[BOX_CLOSE]
    ids = list(token_ids)
    try:
        start = len(ids) - 1 - ids[::-1].index(open_id)
    except ValueError:
        return None
    for j in range(start + 1, len(ids)):
        if ids[j] == close_id:
            return ids[start + 1:j]
    return None
