# Data models and schemas
