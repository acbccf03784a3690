use std::cell::RefCell;

use super::{Example, ProtocolError, SessionDataset};

/// Where the protocol gets session data from. Training data is handed over
/// by value, once; evaluation data stays readable.
pub trait SessionSource {
    fn num_sessions(&self) -> usize;
    fn classes(&self, session: usize) -> Result<Vec<usize>, ProtocolError>;
    /// Move the session's training split out of the source.
    fn take_train(&mut self, session: usize) -> Result<SessionDataset, ProtocolError>;
    fn eval(&self, session: usize) -> Result<&[Example], ProtocolError>;
}

/// Sessions held in memory. `take_train` empties the slot, so a second
/// request for the same session fails with `DataUnavailable`.
#[derive(Debug)]
pub struct InMemorySource {
    train: Vec<Option<Vec<Example>>>,
    eval: Vec<Vec<Example>>,
    classes: Vec<Vec<usize>>,
}

impl InMemorySource {
    pub fn new(sessions: Vec<SessionDataset>) -> Self {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        let mut classes = Vec::new();
        for s in sessions {
            train.push(Some(s.train));
            eval.push(s.eval);
            classes.push(s.classes);
        }
        Self { train, eval, classes }
    }
}

impl SessionSource for InMemorySource {
    fn num_sessions(&self) -> usize {
        self.classes.len()
    }

    fn classes(&self, session: usize) -> Result<Vec<usize>, ProtocolError> {
        self.classes.get(session).cloned().ok_or(ProtocolError::UnknownSession(session))
    }

    fn take_train(&mut self, session: usize) -> Result<SessionDataset, ProtocolError> {
        let slot = self.train.get_mut(session).ok_or(ProtocolError::UnknownSession(session))?;
        let train = slot.take().ok_or(ProtocolError::DataUnavailable(session))?;
        Ok(SessionDataset {
            index: session,
            classes: self.classes[session].clone(),
            train,
            eval: Vec::new(),
        })
    }

    fn eval(&self, session: usize) -> Result<&[Example], ProtocolError> {
        self.eval.get(session).map(Vec::as_slice).ok_or(ProtocolError::UnknownSession(session))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub kind: AccessKind,
    pub session: usize,
}

/// Wraps a source and records every data access in order.
#[derive(Debug)]
pub struct InstrumentedSource<S> {
    inner: S,
    log: RefCell<Vec<Access>>,
}

impl<S: SessionSource> InstrumentedSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn log(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }

    /// Training reads of an earlier session after a later session's
    /// training data was handed out.
    pub fn stale_train_reads(&self) -> Vec<Access> {
        let mut latest = None;
        let mut stale = Vec::new();
        for a in self.log.borrow().iter().filter(|a| a.kind == AccessKind::Train) {
            if latest.is_some_and(|l| a.session <= l) {
                stale.push(*a);
            }
            latest = Some(latest.map_or(a.session, |l: usize| l.max(a.session)));
        }
        stale
    }
}

impl<S: SessionSource> SessionSource for InstrumentedSource<S> {
    fn num_sessions(&self) -> usize {
        self.inner.num_sessions()
    }

    fn classes(&self, session: usize) -> Result<Vec<usize>, ProtocolError> {
        self.inner.classes(session)
    }

    fn take_train(&mut self, session: usize) -> Result<SessionDataset, ProtocolError> {
        self.log.borrow_mut().push(Access {
            kind: AccessKind::Train,
            session,
        });
        self.inner.take_train(session)
    }

    fn eval(&self, session: usize) -> Result<&[Example], ProtocolError> {
        self.log.borrow_mut().push(Access {
            kind: AccessKind::Eval,
            session,
        });
        self.inner.eval(session)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_data_moves_out_once() {
        let s = SessionDataset {
            index: 0,
            classes: vec![1],
            train: Vec::new(),
            eval: Vec::new(),
        };
        let mut src = InstrumentedSource::new(InMemorySource::new(vec![s.clone(), SessionDataset { index: 1, ..s }]));
        src.take_train(0).unwrap();
        assert!(matches!(src.take_train(0), Err(ProtocolError::DataUnavailable(0))));
        src.take_train(1).unwrap();
        assert!(matches!(src.take_train(5), Err(ProtocolError::UnknownSession(5))));
        assert_eq!(src.stale_train_reads().len(), 1);
    }
}
