"""Frozen English stopword list used by the token-overlap analysis.

The list is fixed and versioned so overlap numbers are reproducible across
installations; it is not configurable at run time (callers may pass their
own set to ``dice`` explicitly).
"""

STOPWORDS_VERSION = "1"

STOPWORDS = frozenset("""
a about above after again against all am an and any are as at
be because been before being below between both but by
can did do does doing down during
each few for from further
had has have having he her here hers herself him himself his how
i if in into is it its itself
just me more most my myself
no nor not now
of off on once only or other our ours ourselves out over own
same she should so some such
than that the their theirs them themselves then there these they this those through to too
under until up very
was we were what when where which while who whom why will with
you your yours yourself yourselves
""".split())
