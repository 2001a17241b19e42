//! Small hand-checked instances shared by tests, examples and the CLI.

use crate::alignment::Span;
use crate::dialogue::{DialogueInstance, TokenizationMode};
use crate::tags::{TagProgram, TokenTag};

/// Weather dialogue (word-segmented): the last turn omits the city and uses a
/// pronoun for "always raining".
pub fn winter_weather_dialogue() -> DialogueInstance {
    DialogueInstance::from_text(
        &["上海 最近 天气 怎么样 ？", "最近 经常 阴天 下雨 。"],
        "冬天 就是 这样 。",
        Some("上海 冬天 就是 经常 阴天 下雨 。"),
        TokenizationMode::Word,
    )
}

/// Gold program of [`winter_weather_dialogue`].
pub fn winter_weather_program() -> TagProgram {
    TagProgram::new(vec![
        TokenTag::insert(Span::new(0, 0)),
        TokenTag::KEEP,
        TokenTag::replace(Span::new(6, 8)),
        TokenTag::KEEP,
        TokenTag::KEEP,
    ])
}
