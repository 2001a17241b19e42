//! Compiles (context, utterance, reference) triples into gold tag programs.
//!
//! Both utterance and reference are wrapped in start/end sentinels and aligned
//! with LCS. Consecutive alignment pairs are then compared:
//!
//! * adjacent on both sides: the current token is kept unchanged;
//! * adjacent only on the input side: the reference tokens in between are an
//!   omission, inserted in front of the current token;
//! * adjacent only on the reference side: the input tokens in between are deleted;
//! * adjacent on neither side: the input tokens in between are replaced. The
//!   left-most one carries the insertion, the others are plain deletions.
//!
//! Every inserted phrase must occur contiguously inside one context turn,
//! otherwise the instance is uncovered.

use std::ops::Range;

use thiserror::Error;

use crate::alignment::{find_span, lcs_align, Span};
use crate::dialogue::{DialogueInstance, FlatContext, Token};
use crate::tags::{TagProgram, TokenTag};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("instance has no reference")]
    MissingReference,
    /// Domain outcome: the reference needs a phrase that is not in the context.
    #[error("uncovered: phrase {0:?} has no occurrence in the context")]
    Uncovered(Vec<Token>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageReport {
    pub covered: bool,
    /// First reference segment with no context occurrence.
    pub failing_phrase: Option<Vec<Token>>,
}

#[derive(PartialEq)]
enum Sym<'a> {
    Start,
    Tok(&'a str),
    End,
}

fn wrap(tokens: &[Token]) -> Vec<Sym<'_>> {
    std::iter::once(Sym::Start)
        .chain(tokens.iter().map(|t| Sym::Tok(t)))
        .chain(std::iter::once(Sym::End))
        .collect()
}

/// Edit between two consecutive alignment pairs, in unwrapped coordinates.
struct Gap {
    /// Utterance indices dropped between the pairs.
    deleted: Range<usize>,
    /// Program position of the right-hand aligned token (utterance length = END).
    current: usize,
    /// Context span of the reference tokens between the pairs.
    span: Option<Span>,
}

fn walk_gaps(
    utterance: &[Token],
    reference: &[Token],
    ctx: &FlatContext,
    mut visit: impl FnMut(Gap),
) -> Result<(), CompileError> {
    let alignment = lcs_align(&wrap(utterance), &wrap(reference));
    debug_assert_eq!(alignment.pairs.first(), Some(&(0, 0)));
    debug_assert_eq!(alignment.pairs.last(), Some(&(utterance.len() + 1, reference.len() + 1)));
    for w in alignment.pairs.windows(2) {
        let ((i0, j0), (i1, j1)) = (w[0], w[1]);
        let phrase = &reference[j0..j1 - 1];
        let span = if phrase.is_empty() {
            None
        } else {
            Some(find_span(phrase, ctx).ok_or_else(|| CompileError::Uncovered(phrase.to_vec()))?)
        };
        visit(Gap { deleted: i0..i1 - 1, current: i1 - 1, span });
    }
    Ok(())
}

fn reference_of(instance: &DialogueInstance) -> Result<&[Token], CompileError> {
    instance.reference.as_deref().ok_or(CompileError::MissingReference)
}

/// Builds the gold program for `instance`.
pub fn compile_tags(instance: &DialogueInstance) -> Result<TagProgram, CompileError> {
    compile_with_context(instance, &instance.flat_context())
}

/// As [`compile_tags`], reusing an already flattened context.
pub fn compile_with_context(instance: &DialogueInstance, ctx: &FlatContext) -> Result<TagProgram, CompileError> {
    let reference = reference_of(instance)?;
    let mut program = TagProgram::identity(instance.utterance.len());
    walk_gaps(&instance.utterance, reference, ctx, |gap| {
        let tags = &mut program.tags;
        match (gap.deleted.is_empty(), gap.span) {
            (true, None) => {}
            (true, Some(span)) => tags[gap.current] = TokenTag::insert(span),
            (false, None) => gap.deleted.for_each(|k| tags[k] = TokenTag::DELETE),
            (false, Some(span)) => {
                let first = gap.deleted.start;
                tags[first] = TokenTag::replace(span);
                gap.deleted.skip(1).for_each(|k| tags[k] = TokenTag::DELETE);
            }
        }
    })?;
    Ok(program)
}

/// Reports whether `instance` compiles, without building a program.
pub fn check_coverage(instance: &DialogueInstance) -> Result<CoverageReport, CompileError> {
    let reference = reference_of(instance)?;
    Ok(match walk_gaps(&instance.utterance, reference, &instance.flat_context(), |_| {}) {
        Ok(()) => CoverageReport { covered: true, failing_phrase: None },
        Err(CompileError::Uncovered(phrase)) => CoverageReport { covered: false, failing_phrase: Some(phrase) },
        Err(e) => return Err(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::winter_weather_dialogue;
    use crate::reconstruct::apply_tags;
    use crate::tags::TagShape;

    fn toks(s: &[&str]) -> Vec<Token> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn worked_example_tags() {
        let inst = winter_weather_dialogue();
        let program = compile_tags(&inst).unwrap();
        assert_eq!(
            program.tags,
            vec![
                TokenTag::insert(Span::new(0, 0)),
                TokenTag::KEEP,
                TokenTag::replace(Span::new(6, 8)),
                TokenTag::KEEP,
                TokenTag::KEEP,
            ]
        );
        assert!(check_coverage(&inst).unwrap().covered);
    }

    #[test]
    fn identity_reference_compiles_to_keep_everywhere() {
        let u = toks(&["a", "b", "c"]);
        let inst = DialogueInstance::new(vec![toks(&["x"])], u.clone(), Some(u));
        assert_eq!(compile_tags(&inst).unwrap(), TagProgram::identity(3));
        assert!(check_coverage(&inst).unwrap().covered);
    }

    #[test]
    fn missing_phrase_is_uncovered() {
        let inst = DialogueInstance::new(vec![toks(&["a", "b"])], toks(&["c"]), Some(toks(&["c", "ω"])));
        assert_eq!(compile_tags(&inst), Err(CompileError::Uncovered(toks(&["ω"]))));
        let report = check_coverage(&inst).unwrap();
        assert!(!report.covered);
        assert_eq!(report.failing_phrase, Some(toks(&["ω"])));
    }

    #[test]
    fn missing_reference_is_an_error() {
        let inst = DialogueInstance::new(vec![], toks(&["a"]), None);
        assert_eq!(compile_tags(&inst), Err(CompileError::MissingReference));
        assert_eq!(check_coverage(&inst), Err(CompileError::MissingReference));
    }

    #[test]
    fn trailing_insertion_lands_on_end_sentinel() {
        let inst = DialogueInstance::new(
            vec![toks(&["p", "q"])],
            toks(&["a"]),
            Some(toks(&["a", "p", "q"])),
        );
        let program = compile_tags(&inst).unwrap();
        assert_eq!(program.tags, vec![TokenTag::KEEP, TokenTag::insert(Span::new(0, 1))]);
    }

    #[test]
    fn pure_deletion_and_multi_token_replacement() {
        let ctx = vec![toks(&["x", "y"])];
        let del = DialogueInstance::new(ctx.clone(), toks(&["a", "b", "c", "d"]), Some(toks(&["a", "d"])));
        assert_eq!(
            compile_tags(&del).unwrap().tags,
            vec![TokenTag::KEEP, TokenTag::DELETE, TokenTag::DELETE, TokenTag::KEEP, TokenTag::KEEP]
        );

        let rep = DialogueInstance::new(ctx, toks(&["a", "b", "c", "d"]), Some(toks(&["a", "x", "y", "d"])));
        assert_eq!(
            compile_tags(&rep).unwrap().tags,
            vec![
                TokenTag::KEEP,
                TokenTag::replace(Span::new(0, 1)),
                TokenTag::DELETE,
                TokenTag::KEEP,
                TokenTag::KEEP
            ]
        );
    }

    #[test]
    fn phrase_split_across_turns_is_uncovered() {
        let inst = DialogueInstance::new(
            vec![toks(&["x", "y"]), toks(&["z"])],
            toks(&["a"]),
            Some(toks(&["y", "z", "a"])),
        );
        assert_eq!(compile_tags(&inst), Err(CompileError::Uncovered(toks(&["y", "z"]))));
    }

    #[test]
    fn emptied_utterance() {
        let inst = DialogueInstance::new(vec![toks(&["x"])], toks(&["a", "b"]), Some(vec![]));
        let program = compile_tags(&inst).unwrap();
        assert_eq!(program.tags, vec![TokenTag::DELETE, TokenTag::DELETE, TokenTag::KEEP]);
        assert!(apply_tags(&inst.utterance, &inst.flat_context(), &program).unwrap().is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from)
        }

        fn instance() -> impl Strategy<Value = DialogueInstance> {
            (
                prop::collection::vec(prop::collection::vec(word(), 0..6), 0..4),
                prop::collection::vec(word(), 1..7),
                prop::collection::vec(word(), 0..9),
            )
                .prop_map(|(ctx, u, r)| DialogueInstance::new(ctx, u, Some(r)))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(2000))]

            #[test]
            fn covered_programs_round_trip_and_are_legal(inst in instance()) {
                let ctx = inst.flat_context();
                let reference = inst.reference.clone().unwrap();
                match compile_tags(&inst) {
                    Ok(program) => {
                        prop_assert!(check_coverage(&inst).unwrap().covered);
                        prop_assert_eq!(program.len(), inst.utterance.len() + 1);
                        prop_assert!(!program.end_tag().unwrap().deletion);
                        for tag in &program.tags {
                            if let Some(sp) = tag.insertion {
                                prop_assert!(sp.is_valid_in(&ctx));
                            }
                            // every tag falls in one of the four legal shapes
                            let _: TagShape = tag.shape();
                        }
                        prop_assert_eq!(apply_tags(&inst.utterance, &ctx, &program).unwrap(), reference);
                        prop_assert_eq!(compile_tags(&inst).unwrap(), program);
                    }
                    Err(CompileError::Uncovered(phrase)) => {
                        prop_assert!(!phrase.is_empty());
                        prop_assert!(find_span(&phrase, &ctx).is_none());
                        prop_assert!(!check_coverage(&inst).unwrap().covered);
                    }
                    Err(e) => prop_assert!(false, "unexpected error {e}"),
                }
            }
        }
    }
}
