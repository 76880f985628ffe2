"""Pipeline plumbing: toy detector, metrics, synthetic datasets and the CLI."""
