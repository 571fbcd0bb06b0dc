//! One text turn and one voice turn through the whole pipeline.

use std::sync::Arc;

use cogassist_core::backend::ScriptedBackend;
use cogassist_core::dialog::{Modality, ModalityInput, PipelineStage};
use cogassist_core::system::{Assistant, Setup};

use crate::common::*;
use crate::Outcome;

const FULL: [PipelineStage; 7] = [
    PipelineStage::Normalize,
    PipelineStage::GuardInput,
    PipelineStage::Retrieve,
    PipelineStage::Generate,
    PipelineStage::GuardOutput,
    PipelineStage::Persist,
    PipelineStage::Render,
];

pub fn run() -> Outcome {
    let backend = Arc::new(ScriptedBackend::echo());
    let mut setup = Setup::new(fixed_clock());
    setup.registry = staff_registry();
    setup.backend = backend.clone();
    let (a, _sink) = Assistant::in_memory(setup);
    ingest_manuals(&a);
    let c = who(OPERATOR);

    let text = a
        .chat(&c, None, &ModalityInput::text(QUESTIONS[0]), Modality::Text)
        .map_err(|e| format!("text turn: {e}"))?;
    ensure!(text.trace == FULL, "text trace {:?}", text.trace);
    ensure!(
        text.turn.input_modality == Modality::Text,
        "text turn recorded as {:?}",
        text.turn.input_modality
    );
    ensure!(
        text.turn.grounded && !text.turn.provenance.is_empty(),
        "text answer not grounded"
    );
    ensure!(
        text.turn.provenance[0].doc_id.as_str() == "press-line-manual",
        "text answer cites {}",
        text.turn.provenance[0].doc_id
    );
    ensure!(
        text.output.modality == Modality::Text && text.output.payload == text.turn.assistant_text,
        "text output {:?}",
        text.output
    );

    let voice_input = ModalityInput::voice("audio/q-0002.wav", Some(QUESTIONS[1]));
    let voice = a
        .chat(&c, Some(&text.conversation_id), &voice_input, Modality::Voice)
        .map_err(|e| format!("voice turn: {e}"))?;
    ensure!(voice.trace == FULL, "voice trace {:?}", voice.trace);
    ensure!(
        voice.turn.input_modality == Modality::Voice,
        "voice turn recorded as {:?}",
        voice.turn.input_modality
    );
    ensure!(
        voice.turn.user_text == QUESTIONS[1],
        "transcript {:?}",
        voice.turn.user_text
    );
    ensure!(
        voice.turn.grounded && !voice.turn.provenance.is_empty(),
        "voice answer not grounded"
    );
    ensure!(
        voice.turn.provenance[0].doc_id.as_str() == "paint-shop-guide",
        "voice answer cites {}",
        voice.turn.provenance[0].doc_id
    );
    ensure!(
        voice.output.modality == Modality::Voice
            && !voice.output.downgraded
            && voice.output.payload.starts_with("audio:stub:"),
        "voice output {:?}",
        voice.output
    );
    ensure!(voice.turn.turn_index == 1, "voice turn index {}", voice.turn.turn_index);
    let conv = a.history().get(&text.conversation_id).map_err(|e| e.to_string())?;
    ensure!(conv.turns.len() == 2, "{} turns persisted", conv.turns.len());
    ensure!(backend.call_count() == 2, "{} backend calls", backend.call_count());
    Ok(format!(
        "text and voice turns each ran {} stages, both grounded; voice answer rendered as {}",
        FULL.len(),
        voice.output.payload
    ))
}
