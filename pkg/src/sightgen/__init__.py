"""sightgen: difficulty-conditioned piano sight-reading exercises in MusicXML.

Pipeline: parse two-staff MusicXML into score fragments, tokenize them,
label difficulty with interpretable descriptors plus a Gaussian Naive Bayes
model, train a small decoder-only transformer with a prompt prefix and an
auxiliary difficulty head, then sample exercises at a requested level and
write them back as MusicXML.
"""

__version__ = "0.1.0"

from .errors import SightgenError

__all__ = ["SightgenError", "__version__"]
