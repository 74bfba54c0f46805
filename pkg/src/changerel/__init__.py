"""Change detection with explicit change-relation learning."""
