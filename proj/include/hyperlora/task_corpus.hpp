#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlora/errors.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/serialize.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Synthetic string-transformation tasks. Each kind owns a prompt template
// ("<keyword>: <payload>") and an exact answer rule, so adapter quality is
// measurable by exact-match accuracy and every sample is machine-checkable.
// ---------------------------------------------------------------------------

enum class TaskKind {
  kReverse,
  kCopy,
  kSortDigits,
  kParity,
  kModAdd,
  kUppercase,
  kVowelCount,
};

inline const std::vector<TaskKind>& all_task_kinds() {
  static const std::vector<TaskKind> kinds = {
      TaskKind::kReverse,  TaskKind::kCopy,      TaskKind::kSortDigits,
      TaskKind::kParity,   TaskKind::kModAdd,    TaskKind::kUppercase,
      TaskKind::kVowelCount};
  return kinds;
}

inline std::string task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kCopy: return "copy";
    case TaskKind::kSortDigits: return "sort_digits";
    case TaskKind::kParity: return "parity";
    case TaskKind::kModAdd: return "mod_add";
    case TaskKind::kUppercase: return "uppercase";
    case TaskKind::kVowelCount: return "vowel_count";
  }
  throw ConfigError("invalid task kind value");
}

inline TaskKind task_kind_from_string(std::string_view name) {
  for (TaskKind k : all_task_kinds())
    if (task_kind_name(k) == name) return k;
  throw ConfigError("unknown task kind: '" + std::string(name) + "'");
}

inline std::string task_prompt_prefix(TaskKind kind) {
  switch (kind) {
    case TaskKind::kReverse: return "reverse: ";
    case TaskKind::kCopy: return "copy: ";
    case TaskKind::kSortDigits: return "sort: ";
    case TaskKind::kParity: return "parity: ";
    case TaskKind::kModAdd: return "add: ";
    case TaskKind::kUppercase: return "upper: ";
    case TaskKind::kVowelCount: return "vowels: ";
  }
  throw ConfigError("invalid task kind value");
}

inline std::string task_payload_charset(TaskKind kind) {
  switch (kind) {
    case TaskKind::kReverse:
    case TaskKind::kCopy:
    case TaskKind::kUppercase:
    case TaskKind::kVowelCount:
      return "abcdefghijklmnopqrstuvwxyz";
    case TaskKind::kSortDigits:
    case TaskKind::kModAdd:
      return "0123456789";
    case TaskKind::kParity:
      return "01";
  }
  throw ConfigError("invalid task kind value");
}

inline constexpr int kMinPayloadLen = 4;
inline constexpr int kMaxPayloadLen = 10;
inline constexpr int kMaxPromptLen = 32;

// Ground-truth rule for one kind. Exact by construction.
inline std::string task_rule_answer(TaskKind kind, std::string_view payload) {
  switch (kind) {
    case TaskKind::kReverse:
      return std::string(payload.rbegin(), payload.rend());
    case TaskKind::kCopy:
      return std::string(payload);
    case TaskKind::kSortDigits: {
      std::string s(payload);
      std::sort(s.begin(), s.end());
      return s;
    }
    case TaskKind::kParity: {
      int ones = 0;
      for (char c : payload) ones += (c == '1');
      return (ones % 2 == 1) ? "odd" : "even";
    }
    case TaskKind::kModAdd: {
      int sum = 0;
      for (char c : payload) sum += c - '0';
      return std::string(1, static_cast<char>('0' + sum % 10));
    }
    case TaskKind::kUppercase: {
      std::string s(payload);
      for (char& c : s) c = static_cast<char>(c - 'a' + 'A');
      return s;
    }
    case TaskKind::kVowelCount: {
      int n = 0;
      for (char c : payload)
        n += (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u');
      return std::to_string(n);
    }
  }
  throw ConfigError("invalid task kind value");
}

enum class Split { kTrain, kTest };

inline std::string split_name(Split s) {
  return s == Split::kTrain ? "train" : "test";
}

struct TaskDataset {
  std::string task_id;
  TaskKind kind = TaskKind::kCopy;
  std::vector<std::string> prompts;
  std::vector<std::string> answers;  // aligned with prompts
  std::vector<Split> splits;         // aligned with prompts

  std::size_t size() const { return prompts.size(); }

  std::vector<std::size_t> split_indices(Split s) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) idx.push_back(i);
    return idx;
  }

  std::vector<std::string> split_prompts(Split s) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(prompts[i]);
    return out;
  }

  std::size_t train_count() const { return split_indices(Split::kTrain).size(); }
  std::size_t test_count() const { return split_indices(Split::kTest).size(); }
};

// Template/grammar validator: prompt matches the kind's template and the
// answer matches the kind's rule.
inline bool task_sample_valid(TaskKind kind, std::string_view prompt,
                              std::string_view answer) {
  const std::string prefix = task_prompt_prefix(kind);
  if (prompt.size() <= prefix.size() ||
      prompt.substr(0, prefix.size()) != prefix)
    return false;
  std::string_view payload = prompt.substr(prefix.size());
  if (payload.size() < kMinPayloadLen || payload.size() > kMaxPayloadLen)
    return false;
  const std::string charset = task_payload_charset(kind);
  for (char c : payload)
    if (charset.find(c) == std::string::npos) return false;
  return task_rule_answer(kind, payload) == answer;
}

inline void validate_task_dataset(const TaskDataset& ds) {
  if (ds.prompts.size() != ds.answers.size() ||
      ds.prompts.size() != ds.splits.size() || ds.prompts.empty())
    throw StructuralError("task dataset fields misaligned or empty");
  std::set<std::string> train_set, test_set;
  for (std::size_t i = 0; i < ds.prompts.size(); ++i) {
    if (!task_sample_valid(ds.kind, ds.prompts[i], ds.answers[i]))
      throw StructuralError("task sample " + std::to_string(i) +
                            " violates the '" + task_kind_name(ds.kind) +
                            "' grammar: " + ds.prompts[i]);
    (ds.splits[i] == Split::kTrain ? train_set : test_set).insert(ds.prompts[i]);
  }
  for (const auto& p : test_set)
    if (train_set.count(p))
      throw StructuralError("train/test splits overlap on prompt: " + p);
}

// Deterministic task construction: unique payloads, 90/10 train/test split.
inline TaskDataset make_task(TaskKind kind, std::size_t n_samples,
                             std::uint64_t seed) {
  if (n_samples < 2)
    throw DomainError("make_task requires n_samples >= 2, got " +
                      std::to_string(n_samples));
  Rng rng(derive_seed(seed, "corpus/" + task_kind_name(kind)));
  const std::string charset = task_payload_charset(kind);
  const std::string prefix = task_prompt_prefix(kind);

  std::set<std::string> seen;
  TaskDataset ds;
  ds.task_id = task_kind_name(kind);
  ds.kind = kind;
  std::size_t attempts = 0;
  const std::size_t max_attempts = 200 * n_samples + 1000;
  while (ds.prompts.size() < n_samples) {
    if (++attempts > max_attempts)
      throw DomainError("task '" + task_kind_name(kind) +
                        "' cannot produce " + std::to_string(n_samples) +
                        " unique prompts");
    int len = kMinPayloadLen +
              static_cast<int>(rng.uniform_int(kMaxPayloadLen - kMinPayloadLen + 1));
    std::string payload;
    payload.reserve(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i)
      payload.push_back(charset[static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(charset.size())))]);
    if (!seen.insert(payload).second) continue;
    ds.prompts.push_back(prefix + payload);
    ds.answers.push_back(task_rule_answer(kind, payload));
  }
  std::size_t n_test = std::max<std::size_t>(1, n_samples / 10);
  std::size_t n_train = n_samples - n_test;
  ds.splits.assign(n_samples, Split::kTrain);
  for (std::size_t i = n_train; i < n_samples; ++i) ds.splits[i] = Split::kTest;
  return ds;
}

// ---------------------------------------------------------------------------
// Prompt batches (the task's "fingerprint" fed to the condition encoder)
// ---------------------------------------------------------------------------

enum class ConditionSource { kPromptOnly, kPromptPlusAnswer, kMixed };

inline std::string condition_source_name(ConditionSource s) {
  switch (s) {
    case ConditionSource::kPromptOnly: return "prompt_only";
    case ConditionSource::kPromptPlusAnswer: return "prompt_plus_answer";
    case ConditionSource::kMixed: return "mixed";
  }
  throw ConfigError("invalid condition source value");
}

inline ConditionSource condition_source_from_string(std::string_view name) {
  if (name == "prompt_only") return ConditionSource::kPromptOnly;
  if (name == "prompt_plus_answer") return ConditionSource::kPromptPlusAnswer;
  if (name == "mixed") return ConditionSource::kMixed;
  throw ConfigError("unknown condition source: '" + std::string(name) + "'");
}

struct PromptBatch {
  std::string task_id;
  std::vector<std::string> items;  // realized condition texts
  ConditionSource condition_source = ConditionSource::kPromptOnly;
};

namespace detail {

inline std::vector<std::string> realize_condition_items(
    const TaskDataset& ds, const std::vector<std::size_t>& train_idx,
    const std::vector<std::size_t>& picked, ConditionSource source) {
  std::vector<std::string> items;
  items.reserve(picked.size());
  // mixed keeps the paper's 4:1 prompt:answer ratio, rounding toward prompts
  std::size_t n_prompt = picked.size();
  if (source == ConditionSource::kMixed)
    n_prompt = (picked.size() * 4 + 4) / 5;  // ceil(0.8 * b)
  for (std::size_t i = 0; i < picked.size(); ++i) {
    std::size_t sample = train_idx[picked[i]];
    switch (source) {
      case ConditionSource::kPromptOnly:
        items.push_back(ds.prompts[sample]);
        break;
      case ConditionSource::kPromptPlusAnswer:
        items.push_back(ds.prompts[sample] + " " + ds.answers[sample]);
        break;
      case ConditionSource::kMixed:
        items.push_back(i < n_prompt ? ds.prompts[sample] : ds.answers[sample]);
        break;
    }
  }
  return items;
}

}  // namespace detail

// Uniform batch from the first pool_size train prompts. pool_size == batch_len
// degenerates to the fixed-pool pairing policy (strategy 1); pool_size >
// batch_len is the resampled policy (strategy 2).
inline PromptBatch sample_prompt_batch(
    const TaskDataset& ds, std::size_t batch_len, std::size_t pool_size,
    std::uint64_t seed,
    ConditionSource source = ConditionSource::kPromptOnly) {
  const auto train_idx = ds.split_indices(Split::kTrain);
  if (batch_len < 1) throw DomainError("batch_len must be >= 1");
  if (pool_size > train_idx.size())
    throw DomainError("pool_size " + std::to_string(pool_size) +
                      " exceeds train prompts (" +
                      std::to_string(train_idx.size()) + ") of task '" +
                      ds.task_id + "'");
  if (batch_len > pool_size)
    throw DomainError("batch_len " + std::to_string(batch_len) +
                      " exceeds pool_size " + std::to_string(pool_size));
  Rng rng(derive_seed(seed, "batch/" + ds.task_id));
  auto picked = rng.sample_indices(pool_size, batch_len);
  PromptBatch batch;
  batch.task_id = ds.task_id;
  batch.condition_source = source;
  batch.items = detail::realize_condition_items(ds, train_idx, picked, source);
  return batch;
}

// One epoch of non-overlapping batches partitioning the pool (shuffled).
inline std::vector<PromptBatch> epoch_batches(
    const TaskDataset& ds, std::size_t batch_len, std::size_t pool_size,
    std::uint64_t seed, ConditionSource source = ConditionSource::kPromptOnly) {
  const auto train_idx = ds.split_indices(Split::kTrain);
  if (batch_len < 1) throw DomainError("batch_len must be >= 1");
  if (pool_size > train_idx.size())
    throw DomainError("pool_size exceeds train prompts of task '" + ds.task_id + "'");
  Rng rng(derive_seed(seed, "epoch/" + ds.task_id));
  std::vector<std::size_t> order(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<PromptBatch> batches;
  for (std::size_t start = 0; start < pool_size; start += batch_len) {
    std::size_t stop = std::min(pool_size, start + batch_len);
    std::vector<std::size_t> picked(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(stop));
    PromptBatch b;
    b.task_id = ds.task_id;
    b.condition_source = source;
    b.items = detail::realize_condition_items(ds, train_idx, picked, source);
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Line-delimited persistence: {task_id, prompt, answer, split} per line
// ---------------------------------------------------------------------------

inline void save_task_jsonl(const TaskDataset& ds,
                            const std::filesystem::path& path) {
  std::string out;
  for (std::size_t i = 0; i < ds.prompts.size(); ++i) {
    nlohmann::json rec;
    rec["task_id"] = ds.task_id;
    rec["prompt"] = ds.prompts[i];
    rec["answer"] = ds.answers[i];
    rec["split"] = split_name(ds.splits[i]);
    out += rec.dump();
    out += '\n';
  }
  write_file(path, out);
}

inline TaskDataset load_task_jsonl(const std::filesystem::path& path) {
  std::string bytes = read_file(path);
  TaskDataset ds;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) nl = bytes.size();
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    if (ds.prompts.empty()) ds.task_id = rec.at("task_id").get<std::string>();
    ds.prompts.push_back(rec.at("prompt").get<std::string>());
    ds.answers.push_back(rec.at("answer").get<std::string>());
    ds.splits.push_back(rec.at("split").get<std::string>() == "train"
                            ? Split::kTrain
                            : Split::kTest);
  }
  if (ds.prompts.empty())
    throw IoError("task file has no records: " + path.string());
  // recover the kind from the template prefix
  for (TaskKind k : all_task_kinds()) {
    const std::string prefix = task_prompt_prefix(k);
    if (ds.prompts[0].rfind(prefix, 0) == 0) {
      ds.kind = k;
      break;
    }
  }
  return ds;
}

}  // namespace hyperlora
