# Shared helpers: configuration, errors, seeding, caching, statistics
