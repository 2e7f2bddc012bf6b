"""One-shot knowledge transfer toolkit.

Refine a trained teacher's rows into a narrow weight chain once, then
expand that chain - without any further training - into students of any
width between the chain and the teacher.
"""

__version__ = "0.1.0"
