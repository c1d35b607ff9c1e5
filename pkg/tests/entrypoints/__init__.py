# CLI tests package initialization