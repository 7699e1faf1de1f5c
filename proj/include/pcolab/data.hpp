// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "pcolab/model.hpp"

namespace pcolab {

/// (x -> y_w, y_l): y_w preferred over y_l for the same prompt.
struct PreferencePair {
    PromptResponse winner;
    PromptResponse loser;

    const Tokens& prompt() const { return winner.prompt_tokens; }

    void validate(TokenId pad) const {
        winner.validate(pad);
        loser.validate(pad);
        require(winner.prompt_tokens == loser.prompt_tokens, ErrorKind::data,
                "preference pair: winner and loser must share the prompt");
        require(winner.valid_count() > 0 && loser.valid_count() > 0, ErrorKind::data,
                "preference pair: both responses need at least one valid token");
    }
};

/// A response with a binary good/bad label.
struct BinaryItem {
    PromptResponse response;
    bool positive = true;
};

}  // namespace pcolab
