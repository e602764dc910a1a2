#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace crft {

/// Fixed symbol vocabulary of the chain-arithmetic task.
namespace vocab {
inline constexpr int kPlus = 10;
inline constexpr int kMinus = 11;
inline constexpr int kTimes = 12;
inline constexpr int kEquals = 13;
inline constexpr int kStep = 14;     // separates intermediate results
inline constexpr int kAnswer = 15;   // precedes the final answer
inline constexpr int kBos = 16;
inline constexpr int kEos = 17;
inline constexpr int kShotSep = 18;  // ends a demonstration
inline constexpr int kSize = 19;

std::string render(std::span<const int> tokens);
}  // namespace vocab

enum class SegmentTag { demonstration, question, answer };

/// One tag per position of prompt + target.
struct SegmentMap {
    std::vector<SegmentTag> tags;

    std::size_t size() const { return tags.size(); }
    /// Group id of a position for segment-grouped interventions.
    int group_of(std::size_t position, bool grouping) const;
};

struct TaskSample {
    std::vector<int> prompt;
    std::vector<int> target;  // intermediate results, answer marker, answer, EOS
    SegmentMap segments;
    int answer = 0;
    int steps = 0;

    std::size_t total_length() const { return prompt.size() + target.size(); }

    /// Teacher-forced input: prompt followed by all target tokens but the last.
    std::vector<int> teacher_input() const;
    /// Next-token labels aligned with teacher_input(); -1 off the answer span.
    std::vector<int> teacher_labels() const;
    /// Segment tags aligned with teacher_input().
    SegmentMap teacher_segments() const;
};

using Dataset = std::vector<TaskSample>;

enum class Split { train, val, test };

struct ChainArithOptions {
    int n_steps = 4;   // operations per expression; each sample draws from [2, n_steps]
    int modulus = 10;
    int shots = 0;     // solved demonstrations prepended to the prompt
    /// Steps in every demonstration; 0 draws them like the question. A fixed
    /// value puts the question at the same offset in every prompt.
    int shot_steps = 0;
    Split split = Split::train;
    std::vector<int> operators = {vocab::kPlus, vocab::kMinus};
    /// Spell out intermediate results; false gives the bare "A answer EOS".
    bool cot = true;
};

/// Chained modular arithmetic evaluated left to right, e.g. "3+5-2=" with
/// target "8;6A6". Expressions are assigned to splits by a hash of their
/// content, so splits are disjoint by construction.
Dataset gen_chain_arith(std::size_t count, const ChainArithOptions& options, std::uint64_t seed);

Split split_of(std::span<const int> operands, std::span<const int> operators);

/// Independent re-evaluation of a prompt's final question.
int evaluate_expression(std::span<const int> prompt, int modulus);

/// Tokens after the last answer marker, up to EOS.
std::vector<int> extract_answer(std::span<const int> generated);
bool answer_matches(std::span<const int> generated, int answer);

// Line-delimited dataset records.
inline constexpr int kDatasetSchema = 1;
void write_dataset(std::ostream& out, const Dataset& data);
Dataset read_dataset(std::istream& in);

}  // namespace crft
