//! Task identifiers: the eight inference tasks and the three training tasks
//! (the pre-determined-track task has two mirrored variants).

use crate::error::{CoreError, CoreResult};

/// The eight supported song-generation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskId {
    LyricsToSong,
    LyricsToVocals,
    AccompanimentToSong,
    VocalsToSong,
    MusicContinuation,
    SongEditing,
    VocalsEditing,
    VocalsEditingInSong,
}

pub const ALL_TASKS: [TaskId; 8] = [
    TaskId::LyricsToSong,
    TaskId::LyricsToVocals,
    TaskId::AccompanimentToSong,
    TaskId::VocalsToSong,
    TaskId::MusicContinuation,
    TaskId::SongEditing,
    TaskId::VocalsEditing,
    TaskId::VocalsEditingInSong,
];

impl TaskId {
    pub fn name(self) -> &'static str {
        match self {
            TaskId::LyricsToSong => "lyrics-to-song",
            TaskId::LyricsToVocals => "lyrics-to-vocals",
            TaskId::AccompanimentToSong => "accompaniment-to-song",
            TaskId::VocalsToSong => "vocals-to-song",
            TaskId::MusicContinuation => "music-continuation",
            TaskId::SongEditing => "song-editing",
            TaskId::VocalsEditing => "vocals-editing",
            TaskId::VocalsEditingInSong => "vocals-editing-in-song",
        }
    }

    pub fn parse(name: &str) -> CoreResult<TaskId> {
        ALL_TASKS
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| CoreError::UnknownTask { name: name.into() })
    }

    pub fn is_editing(self) -> bool {
        matches!(
            self,
            TaskId::SongEditing | TaskId::VocalsEditing | TaskId::VocalsEditingInSong
        )
    }
}

/// The training-time task mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainTask {
    SongFromLyrics,
    PredeterminedAccomp,
    PredeterminedVocal,
    Editing,
}

impl TrainTask {
    pub fn name(self) -> &'static str {
        match self {
            TrainTask::SongFromLyrics => "song-from-lyrics",
            TrainTask::PredeterminedAccomp => "predetermined-accomp",
            TrainTask::PredeterminedVocal => "predetermined-vocal",
            TrainTask::Editing => "editing",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for t in ALL_TASKS {
            assert_eq!(TaskId::parse(t.name()).unwrap(), t);
        }
        assert!(matches!(
            TaskId::parse("polka").unwrap_err(),
            CoreError::UnknownTask { .. }
        ));
    }
}
