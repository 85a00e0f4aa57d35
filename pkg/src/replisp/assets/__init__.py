"""Text assets shipped with the package (bridge templates, format docs)."""
