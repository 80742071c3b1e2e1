//! Published JSON schema of experiment configs.

pub const CONFIG_SCHEMA: &str = include_str!("../schema/config.schema.json");
