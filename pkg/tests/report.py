"""Lines collected by the acceptance tests and printed in the pytest summary."""

LINES: list = []
