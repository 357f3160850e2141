"""Offline tool that embeds news titles and writes DNNR-EMB files.

The recommendation engine consumes these files; this tool is the only place
a sentence-transformer model runs, so the engine itself stays free of ML
framework dependencies.
"""

__version__ = "0.1.0"

DEFAULT_MODEL_ID = "sentence-transformers/paraphrase-multilingual-MiniLM-L12-v2"
EXPECTED_DIM = 384
