"""
reljudge: LLM relevance assessment and judgment-agreement toolkit.
Grades query-passage pairs 0-3 with an LLM and compares judgment sets.
"""

__version__ = "1.0.0"
