/// Whether larger or smaller metric values are better.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Minimize => a < b,
            Direction::Maximize => a > b,
        }
    }
}

/// Reduce-on-plateau learning-rate schedule with a stopping rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub direction: Direction,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
    epochs: usize,
}

/// Outcome of one [`Plateau::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauStep {
    pub lr: f64,
    pub improved: bool,
    pub stop: bool,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, max_epochs: usize, direction: Direction) -> Plateau {
        Plateau {
            factor,
            patience,
            min_lr,
            max_epochs,
            direction,
            lr,
            best: None,
            bad_epochs: 0,
            epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Restores the mutable part of the state.
    pub fn restore(&mut self, lr: f64, best: Option<f64>, bad_epochs: usize, epochs: usize) {
        self.lr = lr;
        self.best = best;
        self.bad_epochs = bad_epochs;
        self.epochs = epochs;
    }

    /// Records the metric of a finished epoch. After `patience` epochs
    /// without strict improvement the rate is multiplied by `factor`.
    /// Stops once the rate drops below `min_lr` or `max_epochs` is reached.
    pub fn step(&mut self, metric: f64) -> PlateauStep {
        self.epochs += 1;
        let improved = match self.best {
            None => true,
            Some(b) => self.direction.better(metric, b),
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        PlateauStep {
            lr: self.lr,
            improved,
            stop: self.lr < self.min_lr || self.epochs >= self.max_epochs,
        }
    }
}
