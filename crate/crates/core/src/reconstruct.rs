//! Executes tag programs against an utterance and its context.

use std::fmt;

use thiserror::Error;

use crate::dialogue::{FlatContext, Token};
use crate::tags::TagProgram;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LengthMismatch { expected: usize, actual: usize },
    StartAfterEnd { position: usize, start: usize, end: usize },
    OutOfContext { position: usize, end: usize, context_len: usize },
    CrossesTurns { position: usize, start: usize, end: usize },
    EndDeleted,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { expected, actual } => {
                write!(f, "length mismatch: expected {expected} tags, found {actual}")
            }
            Violation::StartAfterEnd { position, start, end } => {
                write!(f, "start > end at position {position}: [{start}, {end}]")
            }
            Violation::OutOfContext { position, end, context_len } => {
                write!(f, "span end {end} at position {position} is outside a context of {context_len} tokens")
            }
            Violation::CrossesTurns { position, start, end } => {
                write!(f, "span [{start}, {end}] at position {position} crosses a turn boundary")
            }
            Violation::EndDeleted => f.write_str("END sentinel carries deletion = 1"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("corrupt tag program: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ProgramError(pub Vec<Violation>);

/// Lists every structural problem of `program`; empty means valid.
pub fn validate_program(program: &TagProgram, utterance_len: usize, ctx: &FlatContext) -> Vec<Violation> {
    let mut out = Vec::new();
    if program.len() != utterance_len + 1 {
        out.push(Violation::LengthMismatch { expected: utterance_len + 1, actual: program.len() });
    }
    for (position, tag) in program.tags.iter().enumerate() {
        let Some(span) = tag.insertion else { continue };
        let (start, end) = (span.start, span.end);
        if start > end {
            out.push(Violation::StartAfterEnd { position, start, end });
        } else if end >= ctx.len() {
            out.push(Violation::OutOfContext { position, end, context_len: ctx.len() });
        } else if ctx.turn_ids[start] != ctx.turn_ids[end] {
            out.push(Violation::CrossesTurns { position, start, end });
        }
    }
    if program.len() == utterance_len + 1 && program.end_tag().is_some_and(|t| t.deletion) {
        out.push(Violation::EndDeleted);
    }
    out
}

/// Runs `program` left to right: each position first emits its inserted
/// span, then its own token unless deleted. END contributes only an insertion.
pub fn apply_tags(utterance: &[Token], ctx: &FlatContext, program: &TagProgram) -> Result<Vec<Token>, ProgramError> {
    let violations = validate_program(program, utterance.len(), ctx);
    if !violations.is_empty() {
        return Err(ProgramError(violations));
    }
    let mut out = Vec::with_capacity(utterance.len());
    for (position, tag) in program.tags.iter().enumerate() {
        if let Some(span) = tag.insertion {
            out.extend_from_slice(&ctx.tokens[span.start..=span.end]);
        }
        if position < utterance.len() && !tag.deletion {
            out.push(utterance[position].clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::Span;
    use crate::dialogue::flatten_context;
    use crate::fixtures::{winter_weather_dialogue, winter_weather_program};
    use crate::tags::TokenTag;

    fn toks(s: &[&str]) -> Vec<Token> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn worked_example_rewrite() {
        let inst = winter_weather_dialogue();
        let ctx = inst.flat_context();
        let out = apply_tags(&inst.utterance, &ctx, &winter_weather_program()).unwrap();
        assert_eq!(out, toks(&["上海", "冬天", "就是", "经常", "阴天", "下雨", "。"]));
        assert!(validate_program(&winter_weather_program(), inst.utterance.len(), &ctx).is_empty());
    }

    #[test]
    fn identity_and_annihilation() {
        let u = toks(&["a", "b", "c"]);
        let ctx = flatten_context(&[toks(&["x"])]);
        assert_eq!(apply_tags(&u, &ctx, &TagProgram::identity(3)).unwrap(), u);
        let mut kill = TagProgram::identity(3);
        kill.tags[..3].fill(TokenTag::DELETE);
        assert!(apply_tags(&u, &ctx, &kill).unwrap().is_empty());
    }

    #[test]
    fn violations_are_reported() {
        let ctx = flatten_context(&[toks(&["a", "b", "c", "d", "e", "f"]), toks(&["g"])]);
        let mut p = TagProgram::identity(2);
        p.tags[0].insertion = Some(Span { start: 5, end: 3 });
        let v = validate_program(&p, 2, &ctx);
        assert_eq!(v, vec![Violation::StartAfterEnd { position: 0, start: 5, end: 3 }]);
        assert!(v[0].to_string().contains("start > end"));

        let v = validate_program(&TagProgram::identity(3), 2, &ctx);
        assert!(matches!(v[0], Violation::LengthMismatch { .. }));
        assert!(v[0].to_string().contains("length mismatch"));

        let mut p = TagProgram::identity(1);
        p.tags[0].insertion = Some(Span::new(5, 6));
        p.tags[1] = TokenTag::replace(Span::new(0, 9));
        let v = validate_program(&p, 1, &ctx);
        assert_eq!(v.len(), 3);
        assert!(matches!(v[0], Violation::CrossesTurns { .. }));
        assert!(matches!(v[1], Violation::OutOfContext { .. }));
        assert_eq!(v[2], Violation::EndDeleted);
        assert!(apply_tags(&toks(&["u"]), &ctx, &p).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn case() -> impl Strategy<Value = (Vec<Token>, Vec<Vec<Token>>, Vec<(bool, Option<(usize, usize)>)>)> {
            (1usize..8, prop::collection::vec(1usize..5, 1..4)).prop_flat_map(|(n, turn_sizes)| {
                let u: Vec<Token> = (0..n).map(|i| format!("u{i}")).collect();
                let mut k = 0;
                let turns: Vec<Vec<Token>> = turn_sizes
                    .iter()
                    .map(|&s| (0..s).map(|_| { k += 1; format!("c{k}") }).collect())
                    .collect();
                let tags = prop::collection::vec((any::<bool>(), prop::option::of((0usize..100, 0usize..100))), n + 1);
                (Just(u), Just(turns), tags)
            })
        }

        proptest! {
            #[test]
            fn executor_is_total_on_valid_programs((u, turns, raw) in case()) {
                let ctx = flatten_context(&turns);
                // project raw spans onto valid ones inside a single turn
                let tags: Vec<TokenTag> = raw.iter().enumerate().map(|(i, &(d, sp))| {
                    let insertion = sp.map(|(a, b)| {
                        let [lo, hi] = ctx.turn_bounds[a % ctx.turn_bounds.len()];
                        let width = hi - lo + 1;
                        let s = lo + b % width;
                        Span::new(s, s + (a / 7) % (hi - s + 1))
                    });
                    TokenTag { deletion: d && i < u.len(), insertion }
                }).collect();
                let program = TagProgram::new(tags);
                prop_assert!(validate_program(&program, u.len(), &ctx).is_empty());
                let out = apply_tags(&u, &ctx, &program).unwrap();
                let kept = program.tags[..u.len()].iter().filter(|t| !t.deletion).count();
                let inserted: usize = program.tags.iter().filter_map(|t| t.insertion).map(|s| s.len()).sum();
                prop_assert_eq!(out.len(), kept + inserted);
            }

            #[test]
            fn identity_program_is_identity(u in prop::collection::vec("[a-z]{1,3}", 0..10)) {
                let ctx = FlatContext::default();
                prop_assert_eq!(apply_tags(&u, &ctx, &TagProgram::identity(u.len())).unwrap(), u);
            }
        }
    }
}
