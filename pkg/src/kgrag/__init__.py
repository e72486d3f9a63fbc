"""Knowledge-graph-guided retrieval-augmented QA over structured documents."""

__version__ = "0.1.0"
